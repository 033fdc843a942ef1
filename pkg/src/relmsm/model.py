"""State space and transition structure for multi-state models.

A model is defined by an ordered list of states (each transient or
absorbing) and a set of numbered transitions between them.  Transitions
into death states can be marked as *split*: estimation then divides each
of them into an excess part (disease related) and a population part
(driven by external mortality tables), which replace the observed death
state by a pair of absorbing states.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path


class ModelError(ValueError):
    """Invalid state space, transition structure or split annotation."""


@dataclass(frozen=True)
class Transition:
    """A directed transition between two states (1-based state numbers)."""

    trans_id: int
    from_state: int
    to_state: int
    # "observed" for transitions present in the data; "excess"/"population"
    # for the derived halves of a split transition.
    kind: str = "observed"
    parent_id: int | None = None


@dataclass(frozen=True)
class TransitionModel:
    """Validated multi-state structure, immutable after construction.

    States and transitions are identified by dense 1-based integers;
    labels are metadata only.  ``split_map`` sends an observed transition
    id to the pair ``(excess_id, population_id)`` of derived transition
    ids, which are numbered after the observed ones.

    The *extended* state space replaces every split death state by the
    absorbing pairs of the transitions that reach it, in transition-id
    order, excess before population.
    """

    state_names: tuple[str, ...]
    absorbing: tuple[bool, ...]
    transitions: tuple[Transition, ...]          # observed, ids 1..M
    split_map: dict[int, tuple[int, int]] = field(default_factory=dict)
    derived: tuple[Transition, ...] = ()         # ids M+1.., excess/population
    ext_state_names: tuple[str, ...] = ()
    ext_absorbing: tuple[bool, ...] = ()
    # observed state number -> extended state number (split death states
    # have no single image and are absent here)
    ext_of_state: dict[int, int] = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_ext_states(self) -> int:
        return len(self.ext_state_names)

    @property
    def n_trans(self) -> int:
        return len(self.transitions)

    def transition(self, trans_id: int) -> Transition:
        if 1 <= trans_id <= len(self.transitions):
            return self.transitions[trans_id - 1]
        j = trans_id - len(self.transitions) - 1
        if 0 <= j < len(self.derived):
            return self.derived[j]
        raise ModelError(f"unknown transition id {trans_id}")

    def is_split(self, trans_id: int) -> bool:
        return trans_id in self.split_map

    @property
    def extended_transitions(self) -> tuple[Transition, ...]:
        """Active transitions of the extended model: non-split observed
        transitions plus the derived excess/population halves."""
        kept = tuple(t for t in self.transitions if t.trans_id not in self.split_map)
        return kept + self.derived

    def extended_endpoints(self, trans_id: int) -> tuple[int, int]:
        """(from, to) of a transition in extended state numbering."""
        t = self.transition(trans_id)
        if t.kind == "observed" and t.trans_id in self.split_map:
            raise ModelError(
                f"transition {trans_id} is split; it has no single extended image"
            )
        return self.ext_of_state[t.from_state], self._ext_target[trans_id]

    @property
    def _ext_target(self) -> dict[int, int]:
        return self.__dict__["_ext_target_cache"]

    def unsplit(self) -> "TransitionModel":
        """The observed model with all split annotations removed."""
        return build_model(
            [(n, a) for n, a in zip(self.state_names, self.absorbing)],
            [(t.from_state, t.to_state) for t in self.transitions],
            split=(),
        )


def build_model(
    states: list[tuple[str, bool]],
    transitions: list[tuple[int, int]],
    split: tuple[int, ...] | list[int] = (),
) -> TransitionModel:
    """Build and validate a :class:`TransitionModel`.

    Parameters
    ----------
    states
        ``(label, absorbing)`` pairs; state numbers are their 1-based
        positions in this list.
    transitions
        ``(from_state, to_state)`` pairs; transition ids are their
        1-based positions.
    split
        Observed transition ids whose target is a death (absorbing)
        state, to be divided into excess and population parts.
    """
    names = [s[0] for s in states]
    absorbing = [bool(s[1]) for s in states]
    if len(set(names)) != len(names):
        raise ModelError("state labels must be unique")
    n_states = len(states)

    seen: set[tuple[int, int]] = set()
    obs: list[Transition] = []
    for k, (h, j) in enumerate(transitions, start=1):
        if not (1 <= h <= n_states and 1 <= j <= n_states):
            raise ModelError(f"transition {k}: state out of range: {h} -> {j}")
        if h == j:
            raise ModelError(f"transition {k}: self-transition {h} -> {j}")
        if absorbing[h - 1]:
            raise ModelError(f"transition {k} leaves absorbing state {h}")
        if (h, j) in seen:
            raise ModelError(f"duplicate transition {h} -> {j}")
        seen.add((h, j))
        obs.append(Transition(k, h, j))

    split_ids = tuple(split)
    if len(set(split_ids)) != len(split_ids):
        raise ModelError("duplicate split annotation")
    for sid in split_ids:
        if not (1 <= sid <= len(obs)):
            raise ModelError(f"split annotation on unknown transition {sid}")
        if not absorbing[obs[sid - 1].to_state - 1]:
            raise ModelError(
                f"split annotation on transition {sid}: target state "
                f"{obs[sid - 1].to_state} is not a death (absorbing) state"
            )

    # Extended state space: a split death state is replaced, in place, by
    # one (excess, population) absorbing pair per split transition that
    # reaches it; the original state is kept as well if some non-split
    # transition still needs it.  Everything else keeps its relative order.
    split_targets = {obs[sid - 1].to_state for sid in split_ids}
    ext_names: list[str] = []
    ext_absorbing: list[bool] = []
    ext_of_state: dict[int, int] = {}
    pair_states: dict[int, tuple[int, int]] = {}  # split trans id -> (exc, pop)
    for s in range(1, n_states + 1):
        keep = s not in split_targets or any(
            t.to_state == s and t.trans_id not in split_ids for t in obs
        )
        if keep:
            ext_names.append(names[s - 1])
            ext_absorbing.append(absorbing[s - 1])
            ext_of_state[s] = len(ext_names)
        if s in split_targets:
            base = names[s - 1]
            for sid in sorted(split_ids):
                if obs[sid - 1].to_state != s:
                    continue
                frm = names[obs[sid - 1].from_state - 1]
                tag = base if _single_reacher(obs, split_ids, s) else f"{base}[{frm}]"
                ext_names.append(f"{tag}.e")
                ext_absorbing.append(True)
                ext_names.append(f"{tag}.p")
                ext_absorbing.append(True)
                pair_states[sid] = (len(ext_names) - 1, len(ext_names))

    derived: list[Transition] = []
    split_map: dict[int, tuple[int, int]] = {}
    next_id = len(obs) + 1
    ext_target: dict[int, int] = {}
    for sid in sorted(split_ids):
        parent = obs[sid - 1]
        exc_state, pop_state = pair_states[sid]
        exc = Transition(next_id, parent.from_state, parent.to_state, "excess", sid)
        pop = Transition(next_id + 1, parent.from_state, parent.to_state, "population", sid)
        derived.extend([exc, pop])
        split_map[sid] = (next_id, next_id + 1)
        ext_target[next_id] = exc_state
        ext_target[next_id + 1] = pop_state
        next_id += 2
    for t in obs:
        if t.trans_id not in split_map:
            ext_target[t.trans_id] = ext_of_state[t.to_state]

    model = TransitionModel(
        state_names=tuple(names),
        absorbing=tuple(absorbing),
        transitions=tuple(obs),
        split_map=split_map,
        derived=tuple(derived),
        ext_state_names=tuple(ext_names),
        ext_absorbing=tuple(ext_absorbing),
        ext_of_state=ext_of_state,
    )
    object.__setattr__(model, "_ext_target_cache", ext_target)
    return model


def _single_reacher(obs, split_ids, state) -> bool:
    return sum(1 for sid in split_ids if obs[sid - 1].to_state == state) == 1


def model_from_json(path: str | Path) -> TransitionModel:
    """Load a model from a JSON config file.

    Expected layout::

        {
          "states": [{"name": "ARF", "absorbing": false}, ...],
          "transitions": [{"from": 1, "to": 2}, ...],
          "split": [2, 3]
        }
    """
    with open(path) as fh:
        cfg = json.load(fh)
    try:
        states = [(s["name"], bool(s.get("absorbing", False))) for s in cfg["states"]]
        transitions = [(int(t["from"]), int(t["to"])) for t in cfg["transitions"]]
        split = tuple(int(s) for s in cfg.get("split", []))
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model config {path}: {exc}") from exc
    return build_model(states, transitions, split)


def model_to_json(model: TransitionModel, path: str | Path) -> None:
    cfg = {
        "states": [
            {"name": n, "absorbing": a}
            for n, a in zip(model.state_names, model.absorbing)
        ],
        "transitions": [
            {"from": t.from_state, "to": t.to_state} for t in model.transitions
        ],
        "split": sorted(model.split_map),
    }
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2)
        fh.write("\n")


def illness_death_model() -> TransitionModel:
    """The leading example: transplant -> relapse -> death, both death
    routes split into excess and population parts."""
    return build_model(
        states=[("ARF", False), ("Relapse", False), ("NRM", True), ("DaR", True)],
        transitions=[(1, 2), (1, 3), (2, 4)],
        split=(2, 3),
    )
