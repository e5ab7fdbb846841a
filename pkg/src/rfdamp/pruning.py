"""Global magnitude pruning with an exponentially decaying ramp.

Pruned weights are tracked by binary masks and held at exactly 0.0; once a
weight is pruned it never comes back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, StateError

DEFAULT_RAMP_EPOCHS = 100
RAMP_COMPLETION = 0.999


def default_gamma(ramp_epochs: int = DEFAULT_RAMP_EPOCHS) -> float:
    """Decay constant with ``1 - gamma**ramp_epochs == 0.999``."""
    return (1.0 - RAMP_COMPLETION) ** (1.0 / ramp_epochs)


def _ramp_increments(n_final: int, ramp_epochs: int, gamma: float) -> list[int]:
    # ideal cumulative curve n_final * (1 - gamma**e) / (1 - gamma**R) reaches
    # n_final exactly at R; integer increments are its floored real increments
    # plus one extra on the leading epochs to absorb the remainder, which keeps
    # them non-increasing.
    norm = 1.0 - gamma ** ramp_epochs
    ideal = [n_final * (1.0 - gamma ** e) / norm for e in range(ramp_epochs + 1)]
    inc = [math.floor(ideal[e + 1] - ideal[e]) for e in range(ramp_epochs)]
    rem = n_final - sum(inc)
    for e in range(rem):
        inc[e] += 1
    return inc


def schedule_pruned_count(epoch: int, total_prunable: int, target_nonzero: int,
                          ramp_epochs: int = DEFAULT_RAMP_EPOCHS, gamma: float | None = None) -> int:
    """Number of pruned weights after ``epoch`` completed epochs."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    if target_nonzero > total_prunable:
        raise ConfigError(f"prune target {target_nonzero} exceeds the {total_prunable} prunable weights")
    if target_nonzero < 0:
        raise ConfigError(f"prune target must be >= 0, got {target_nonzero}")
    if ramp_epochs < 1:
        raise ConfigError(f"ramp_epochs must be >= 1, got {ramp_epochs}")
    n_final = total_prunable - target_nonzero
    if epoch >= ramp_epochs:
        return n_final
    g = default_gamma(ramp_epochs) if gamma is None else gamma
    if not 0.0 < g < 1.0:
        raise ConfigError(f"gamma must lie in (0, 1), got {g}")
    return sum(_ramp_increments(n_final, ramp_epochs, g)[:epoch])


def schedule(total_prunable: int, target_nonzero: int, ramp_epochs: int = DEFAULT_RAMP_EPOCHS,
             gamma: float | None = None, epochs: int | None = None) -> list[int]:
    """Pruned counts for epochs ``0..epochs`` (default ``0..ramp_epochs``)."""
    epochs = ramp_epochs if epochs is None else epochs
    schedule_pruned_count(0, total_prunable, target_nonzero, ramp_epochs, gamma)
    n_final = total_prunable - target_nonzero
    g = default_gamma(ramp_epochs) if gamma is None else gamma
    inc = _ramp_increments(n_final, ramp_epochs, g)
    out, acc = [0], 0
    for e in range(1, epochs + 1):
        if e <= ramp_epochs:
            acc += inc[e - 1]
        out.append(acc)
    return out


@dataclass
class PruneState:
    """Masks over the prunable tensors plus the ramp parameters.

    ``target_nonzero`` counts non-zero parameters of the whole model
    (non-prunable parameters included), like a model-size budget.
    """

    masks: dict[str, np.ndarray]
    target_nonzero: int
    exempt_params: int
    ramp_epochs: int = DEFAULT_RAMP_EPOCHS
    gamma: float | None = None
    scope: str = "global"
    pruned: int = 0
    history: list[int] = field(default_factory=list)

    @property
    def total_prunable(self) -> int:
        return sum(m.size for m in self.masks.values())

    @property
    def prunable_target(self) -> int:
        return self.target_nonzero - self.exempt_params

    def scheduled(self, epoch: int) -> int:
        return schedule_pruned_count(epoch, self.total_prunable, self.prunable_target, self.ramp_epochs,
                                     self.gamma)


def init_prune_state(network, target_nonzero: int, ramp_epochs: int = DEFAULT_RAMP_EPOCHS,
                     gamma: float | None = None, scope: str = "global") -> PruneState:
    if scope not in ("global", "per_layer"):
        raise ConfigError(f"prune.scope must be 'global' or 'per_layer', got {scope!r}")
    prunable = dict(network.named_prunable())
    masks = {name: np.ones(t.shape, dtype=np.float32) for name, t in prunable.items()}
    prunable_total = sum(m.size for m in masks.values())
    exempt = sum(p.size for _, p in network.named_parameters()) - prunable_total
    if target_nonzero < exempt:
        raise ConfigError(f"prune target {target_nonzero} is below the {exempt} non-prunable parameters")
    if target_nonzero - exempt > prunable_total:
        raise ConfigError(f"prune target {target_nonzero} exceeds model size {prunable_total + exempt}")
    return PruneState(masks, target_nonzero, exempt, ramp_epochs, gamma, scope)


def _rank_candidates(network, state: PruneState):
    """Flat |w| of unpruned weights ordered by (tensor name, flat index)."""
    tensors = dict(network.named_prunable())
    names = sorted(state.masks)
    mags, owners, idxs = [], [], []
    for i, name in enumerate(names):
        alive = np.flatnonzero(state.masks[name].ravel())
        mags.append(np.abs(tensors[name].data.ravel()[alive]))
        owners.append(np.full(alive.size, i, dtype=np.int64))
        idxs.append(alive)
    return names, tensors, np.concatenate(mags), np.concatenate(owners), np.concatenate(idxs)


def apply_magnitude_pruning(network, state: PruneState, new_pruned_count: int) -> PruneState:
    """Prune the smallest-magnitude unpruned weights until ``new_pruned_count`` are pruned."""
    if new_pruned_count < state.pruned:
        raise StateError(f"cannot un-prune: {new_pruned_count} < {state.pruned} already pruned")
    if new_pruned_count > state.total_prunable:
        raise ConfigError(f"cannot prune {new_pruned_count} of {state.total_prunable} prunable weights")
    extra = new_pruned_count - state.pruned
    if extra == 0:
        return state
    names, tensors, mags, owners, idxs = _rank_candidates(network, state)
    if state.scope == "global":
        # stable sort keeps (name, index) order among equal magnitudes
        chosen = np.argsort(mags, kind="stable")[:extra]
        _zero(tensors, state, names, owners[chosen], idxs[chosen])
    else:
        _prune_per_layer(tensors, state, names, mags, owners, idxs, extra)
    state.pruned = new_pruned_count
    return state


def _zero(tensors, state, names, owners, idxs):
    for o in np.unique(owners):
        name = names[o]
        sel = idxs[owners == o]
        state.masks[name].reshape(-1)[sel] = 0
        tensors[name].data.reshape(-1)[sel] = 0


def _prune_per_layer(tensors, state, names, mags, owners, idxs, extra):
    # each tensor gives up weights in proportion to its size; remainder goes
    # to the tensors with the largest fractional share, ties by name
    sizes = np.array([state.masks[n].size for n in names], dtype=np.float64)
    alive = np.array([np.count_nonzero(owners == i) for i in range(len(names))])
    share = extra * sizes / sizes.sum()
    quota = np.minimum(np.floor(share).astype(np.int64), alive)
    left = extra - int(quota.sum())
    order = sorted(range(len(names)), key=lambda i: (-(share[i] - np.floor(share[i])), names[i]))
    while left > 0:
        progressed = False
        for i in order:
            if left == 0:
                break
            if quota[i] < alive[i]:
                quota[i] += 1
                left -= 1
                progressed = True
        if not progressed:
            break
    for i, q in enumerate(quota):
        if q == 0:
            continue
        sel = owners == i
        local = np.argsort(mags[sel], kind="stable")[:q]
        _zero(tensors, state, names, np.full(q, i), idxs[sel][local])


def enforce_masks(network, state: PruneState):
    """Multiply masks into the weights so pruned entries are exactly 0.0 again."""
    tensors = dict(network.named_prunable())
    for name, mask in state.masks.items():
        t = tensors[name]
        t.data *= mask
        # -0.0 from negative weights becomes +0.0
        t.data += 0.0
    return network


def nonzero_prunable(network) -> int:
    return sum(int(np.count_nonzero(t.data)) for _, t in network.named_prunable())
