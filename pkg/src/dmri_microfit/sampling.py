"""Per-shell subsampling of diffusion directions.

Uniformity is scored with the antipodally symmetric Coulomb energy; subsets
are built greedily and then polished with single-swap local search.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .volume_io import GradientTable, Volume4D


class DegenerateDirectionsError(ValueError):
    """Two directions coincide or are antipodal, so the energy is infinite."""


class SamplingError(ValueError):
    pass


_COINCIDE_TOL = 1e-12


def _pair_energies(dirs: np.ndarray) -> np.ndarray:
    diff = np.linalg.norm(dirs[:, None, :] - dirs[None, :, :], axis=2)
    summ = np.linalg.norm(dirs[:, None, :] + dirs[None, :, :], axis=2)
    n = len(dirs)
    off = ~np.eye(n, dtype=bool)
    if np.any(diff[off] < _COINCIDE_TOL):
        i, j = np.argwhere((diff < _COINCIDE_TOL) & off)[0]
        raise DegenerateDirectionsError(f"directions {i} and {j} coincide")
    if np.any(summ[off] < _COINCIDE_TOL):
        i, j = np.argwhere((summ < _COINCIDE_TOL) & off)[0]
        raise DegenerateDirectionsError(f"directions {i} and {j} are antipodal")
    with np.errstate(divide="ignore"):
        energy = 1.0 / diff + 1.0 / summ
    energy[~off] = 0.0
    return energy


def electrostatic_energy(dirs) -> float:
    """Sum over pairs of 1/|u_i - u_j| + 1/|u_i + u_j|."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if len(dirs) < 2:
        return 0.0
    if np.any(np.abs(np.linalg.norm(dirs, axis=1) - 1.0) > 1e-6):
        raise ValueError("directions must have unit norm")
    e = _pair_energies(dirs)
    return float(np.sum(np.triu(e, 1)))


def subsample_shell(shell_dirs, k: int) -> List[int]:
    """Pick ``k`` well-spread directions; returns ascending indices.

    Greedy growth from the lowest-energy pair, then 1-exchange until no swap
    lowers the energy. Ties resolve to the lowest index, so the result is
    deterministic.
    """
    dirs = np.atleast_2d(np.asarray(shell_dirs, dtype=np.float64))
    n = len(dirs)
    if k < 1:
        raise SamplingError("k must be positive")
    if k > n:
        raise SamplingError(f"requested {k} directions from a shell of {n}")
    if k == n:
        return list(range(n))
    if k == 1:
        return [0]

    energy = _pair_energies(dirs)
    masked = energy + np.diag(np.full(n, np.inf))
    # argmin over the flattened upper triangle is row-major, i.e. lexicographic
    i, j = np.unravel_index(np.argmin(np.where(np.triu(np.ones((n, n), bool), 1), masked, np.inf)), (n, n))
    chosen = [int(i), int(j)]
    inside = np.zeros(n, dtype=bool)
    inside[chosen] = True
    load = energy[:, chosen].sum(axis=1)  # energy of each candidate against the set
    while len(chosen) < k:
        cand = np.where(inside, np.inf, load)
        nxt = int(np.argmin(cand))
        chosen.append(nxt)
        inside[nxt] = True
        load += energy[:, nxt]

    # 1-exchange: best strict improvement per pass, lexicographic tie-break
    total = float(np.sum(np.triu(energy[np.ix_(chosen, chosen)], 1)))
    while True:
        sel = np.flatnonzero(inside)
        out = np.flatnonzero(~inside)
        load = energy[:, sel].sum(axis=1)
        # swapping s -> t changes energy by load[t] - E[t, s] - load[s]
        delta = load[None, out] - energy[np.ix_(sel, out)] - load[sel][:, None]
        best = np.argmin(delta)
        a, b = np.unravel_index(best, delta.shape)
        if not delta[a, b] < -1e-12 * max(1.0, total):
            break
        inside[sel[a]] = False
        inside[out[b]] = True
        total += float(delta[a, b])
    return [int(x) for x in np.flatnonzero(inside)]


@dataclass(frozen=True)
class SubsamplingPlan:
    shells: Tuple[Tuple[float, Tuple[int, ...]], ...]
    b0_indices: Tuple[int, ...]
    k_per_shell: int

    @property
    def indices(self) -> List[int]:
        """All kept entries, in full-table order."""
        out = set(self.b0_indices)
        for _, idx in self.shells:
            out.update(idx)
        return sorted(out)

    def validate(self, table: GradientTable) -> None:
        n = len(table)
        seen = set()
        for i in self.indices:
            if not 0 <= i < n:
                raise SamplingError(f"index {i} out of range for a table of {n} entries")
        for i in self.b0_indices:
            if table.bvals[i] != 0:
                raise SamplingError(f"index {i} is not a b0 entry")
        members = {round(s.bvalue, 6): set(s.indices) for s in table.shells}
        for b, idx in self.shells:
            if len(idx) != self.k_per_shell:
                raise SamplingError(f"shell b={b:g} has {len(idx)} indices, expected {self.k_per_shell}")
            if len(set(idx)) != len(idx) or seen & set(idx):
                raise SamplingError("duplicate indices in plan")
            seen |= set(idx)
            shell = members.get(round(b, 6))
            if shell is None or not set(idx) <= shell:
                raise SamplingError(f"indices for b={b:g} do not belong to that shell")

    def to_text(self) -> str:
        lines = [f"b={b:g}: " + ",".join(str(i) for i in idx) for b, idx in self.shells]
        lines.append("b0: " + ",".join(str(i) for i in self.b0_indices))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SubsamplingPlan":
        shells = []
        b0: Tuple[int, ...] = ()
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            idx = tuple(int(t) for t in rest.split(",") if t.strip())
            if key.strip() == "b0":
                b0 = idx
            elif key.startswith("b="):
                shells.append((float(key[2:]), idx))
            else:
                raise SamplingError(f"unrecognized plan line {line!r}")
        k = len(shells[0][1]) if shells else 0
        return cls(tuple(shells), b0, k)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "SubsamplingPlan":
        return cls.from_text(Path(path).read_text())


def make_plan(table: GradientTable, k_per_shell: int, n_b0: int = 1) -> SubsamplingPlan:
    """Select ``k_per_shell`` directions per shell and the first ``n_b0`` b0 volumes."""
    shells = []
    for shell in table.shells:
        idx = np.array(shell.indices)
        local = subsample_shell(table.bvecs[idx], k_per_shell)
        shells.append((shell.bvalue, tuple(int(i) for i in idx[local])))
    b0 = tuple(int(i) for i in table.b0_indices[:n_b0])
    if len(b0) < n_b0:
        raise SamplingError(f"table has only {len(b0)} b0 entries")
    return SubsamplingPlan(tuple(shells), b0, k_per_shell)


def apply_plan(full: Volume4D, table: GradientTable, plan: SubsamplingPlan):
    """Keep the planned volumes; returns (sparse volume, sparse table)."""
    if full.dims[3] != len(table):
        raise SamplingError(f"volume has {full.dims[3]} entries, table has {len(table)}")
    plan.validate(table)
    idx = plan.indices
    return full.take(idx), table.subset(idx)
