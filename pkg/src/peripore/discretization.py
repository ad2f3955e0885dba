"""Point lattices, per-step neighbor search, and phreatic-interface bookkeeping.

Families are rebuilt in the current (deformed) configuration every step.
Bond breakage is absorbing: a registry of ever-broken pairs survives
re-searches, so a pair that leaves a horizon and later re-enters comes
back broken.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DegeneratePointError


def build_lattice(box_min, box_max, spacing, thickness=None):
    """Uniform lattice of cell-centered points filling an axis-aligned box.

    Returns (positions (N,3), volumes (N,), counts per axis). For plane
    problems pass a box that is one cell thick in z and give ``thickness``;
    point volume is then spacing^2 * thickness.
    """
    if spacing <= 0.0:
        raise ValueError("spacing must be positive")
    lo = np.asarray(box_min, dtype=float)
    hi = np.asarray(box_max, dtype=float)
    extent = hi - lo
    counts = np.maximum(np.rint(extent / spacing).astype(int), 1)
    if np.any(np.abs(counts * spacing - extent) > 1e-9 * np.maximum(spacing, extent)):
        raise ValueError(
            f"box extents {extent.tolist()} are not multiples of spacing {spacing}"
        )
    axes = [lo[d] + (np.arange(counts[d]) + 0.5) * spacing for d in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pos = np.stack([X.ravel(), Y.ravel(), Z.ravel()], axis=1)
    if thickness is None:
        vol = spacing**3
    else:
        vol = spacing**2 * thickness
    return pos, np.full(len(pos), vol), counts


def _pair_keys(i, j, n):
    return i.astype(np.int64) * np.int64(n) + j.astype(np.int64)


@dataclass
class FamilyTable:
    """CSR neighbor table with per-bond state.

    ``ptr``/``idx`` give each point's neighbor list (sorted by neighbor id
    for determinism). Per-bond arrays are aligned with ``idx``:
    ``zeta`` the bond vector in the configuration the table was built
    from, ``omega`` the influence value, ``intact`` the breakage flag,
    ``alpha`` the phreatic side (0 same pressure sign as the owner,
    1 opposite), ``energy`` the accumulated bond work density and
    ``energy_rate`` its previous-step integrand (trapezoidal rule).
    ``partner`` maps bond (i,j) to the reverse bond (j,i).
    """

    ptr: np.ndarray
    idx: np.ndarray
    zeta: np.ndarray
    omega: np.ndarray
    intact: np.ndarray
    alpha: np.ndarray
    energy: np.ndarray
    energy_rate: np.ndarray
    partner: np.ndarray
    delta: float
    n_points: int
    # filled by classify_interface / partition_family
    varphi: np.ndarray = None
    omega0_side: np.ndarray = None
    omega0: np.ndarray = None
    omega0_all: np.ndarray = None

    @property
    def owner(self):
        """Owning point index of every bond."""
        counts = np.diff(self.ptr)
        return np.repeat(np.arange(self.n_points), counts)

    @property
    def n_bonds(self):
        return self.idx.shape[0]

    def counts(self):
        return np.diff(self.ptr)

    def keys(self):
        return _pair_keys(self.owner, self.idx, self.n_points)


def segment_sum(values, ptr):
    """Sum bond-aligned values into per-point totals; empty families get 0."""
    n = len(ptr) - 1
    out_shape = (n,) + values.shape[1:]
    if values.shape[0] == 0:
        return np.zeros(out_shape, dtype=values.dtype)
    starts = np.minimum(ptr[:-1], values.shape[0] - 1)
    out = np.add.reduceat(values, starts, axis=0)
    empty = ptr[:-1] == ptr[1:]
    if np.any(empty):
        out[empty] = 0.0
    return out


def influence_values(dist, delta, kind="uniform"):
    """Influence function omega(|zeta|) on [0, delta]."""
    if kind == "uniform":
        return np.ones_like(dist)
    if kind == "gaussian":
        return np.exp(-9.0 * (dist / delta) ** 2)
    raise ValueError(f"unknown influence function '{kind}'")


def neighbor_search(positions, delta, influence="uniform"):
    """Find all families in the current configuration via spatial hashing.

    family(i) = { j != i : |x_j - x_i| <= delta }, inclusive at the
    horizon. Cell size equals delta so only the 27 surrounding cells are
    scanned per cell; cost is near-linear in the point count.
    """
    if delta <= 0.0:
        raise ValueError("horizon must be positive")
    pos = np.asarray(positions, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise ValueError("non-finite positions in neighbor search")
    n = pos.shape[0]

    cells = np.floor(pos / delta).astype(np.int64)
    cells -= cells.min(axis=0)
    dims = cells.max(axis=0) + 1
    cell_id = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(cell_id, kind="stable")
    sorted_ids = cell_id[order]
    uniq, starts = np.unique(sorted_ids, return_index=True)
    starts = np.append(starts, n)
    cell_points = {int(c): order[starts[k]:starts[k + 1]] for k, c in enumerate(uniq)}

    delta2 = delta * delta
    half = [off for off in np.ndindex(3, 3, 3)
            if (off[0] - 1, off[1] - 1, off[2] - 1) > (0, 0, 0)]
    i_chunks, j_chunks = [], []
    for c, pts in cell_points.items():
        cz = c % dims[2]
        cy = (c // dims[2]) % dims[1]
        cx = c // (dims[1] * dims[2])
        # pairs inside the cell
        if len(pts) > 1:
            d = pos[pts][:, None, :] - pos[pts][None, :, :]
            d2 = np.einsum("ijk,ijk->ij", d, d)
            a, b = np.nonzero(np.triu(d2 <= delta2, k=1))
            if a.size:
                i_chunks.append(pts[a])
                j_chunks.append(pts[b])
        # pairs with the forward half of the 27-cell stencil
        for off in half:
            nx, ny, nz = cx + off[0] - 1, cy + off[1] - 1, cz + off[2] - 1
            if not (0 <= nx < dims[0] and 0 <= ny < dims[1] and 0 <= nz < dims[2]):
                continue
            other = cell_points.get(int((nx * dims[1] + ny) * dims[2] + nz))
            if other is None:
                continue
            d = pos[pts][:, None, :] - pos[other][None, :, :]
            d2 = np.einsum("ijk,ijk->ij", d, d)
            a, b = np.nonzero(d2 <= delta2)
            if a.size:
                i_chunks.append(pts[a])
                j_chunks.append(other[b])

    if i_chunks:
        ii = np.concatenate(i_chunks)
        jj = np.concatenate(j_chunks)
        # mirror to get both directions, then sort for deterministic CSR
        owner = np.concatenate([ii, jj])
        neigh = np.concatenate([jj, ii])
        srt = np.lexsort((neigh, owner))
        owner, neigh = owner[srt], neigh[srt]
    else:
        owner = np.empty(0, dtype=np.int64)
        neigh = np.empty(0, dtype=np.int64)

    ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(ptr, owner + 1, 1)
    ptr = np.cumsum(ptr)

    zeta = pos[neigh] - pos[owner]
    dist = np.linalg.norm(zeta, axis=1)
    omega = influence_values(dist, delta, influence)

    nb = neigh.shape[0]
    keys = _pair_keys(owner, neigh, n)
    rev = _pair_keys(neigh, owner, n)
    korder = np.argsort(keys)
    partner = korder[np.searchsorted(keys[korder], rev)]

    fam = FamilyTable(
        ptr=ptr,
        idx=neigh,
        zeta=zeta,
        omega=omega,
        intact=np.ones(nb, dtype=bool),
        alpha=np.zeros(nb, dtype=np.uint8),
        energy=np.zeros(nb),
        energy_rate=np.zeros(nb),
        partner=partner,
        delta=float(delta),
        n_points=n,
    )
    return fam


@dataclass
class BondRegistry:
    """Absorbing pairwise memory that survives family rebuilds.

    Keeps the set of ever-broken pairs plus the accumulated energy of the
    pairs seen in the previous table, keyed by owner*N + neighbor.
    """

    n_points: int
    broken: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    prev_keys: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    prev_energy: np.ndarray = field(default_factory=lambda: np.empty(0))
    prev_rate: np.ndarray = field(default_factory=lambda: np.empty(0))

    def record_break(self, keys_broken):
        if keys_broken.size:
            self.broken = np.unique(np.concatenate([self.broken, keys_broken]))

    def remember(self, family):
        self.prev_keys = family.keys()
        self.prev_energy = family.energy.copy()
        self.prev_rate = family.energy_rate.copy()

    def restore(self, family):
        """Carry intact flags and energies onto a freshly built table."""
        keys = family.keys()
        if self.broken.size:
            family.intact &= ~np.isin(keys, self.broken, assume_unique=False)
        if self.prev_keys.size:
            srt = np.argsort(self.prev_keys)
            sk = self.prev_keys[srt]
            pos = np.searchsorted(sk, keys)
            pos = np.minimum(pos, sk.size - 1)
            hit = sk[pos] == keys
            family.energy[hit] = self.prev_energy[srt][pos[hit]]
            family.energy_rate[hit] = self.prev_rate[srt][pos[hit]]


def classify_interface(family, p_w, zeta_bar=0.0):
    """Flag phreatic points and mark per-bond sides.

    A bond gets alpha=1 when its two ends sit on opposite sides of the
    phreatic surface (sgn treats p_w >= 0 as the saturated side). A point
    is an interface point when its opposite-sign bond fraction exceeds
    ``zeta_bar``; a point whose opposite sub-family is empty stays bulk.
    """
    own = family.owner
    sgn_own = p_w[own] >= 0.0
    sgn_nb = p_w[family.idx] >= 0.0
    family.alpha = (sgn_own != sgn_nb).astype(np.uint8)

    counts = family.counts()
    opp = segment_sum(family.alpha.astype(float), family.ptr)
    frac = np.divide(opp, counts, out=np.zeros(family.n_points), where=counts > 0)
    is_iface = frac > zeta_bar
    # degenerate split (no same-sign or no opposite-sign bonds) -> bulk
    is_iface &= (opp > 0) & (opp < counts)
    # bulk points keep every bond in the same-sign sub-family
    family.alpha[~is_iface[own]] = 0
    return is_iface


def partition_family(family, volumes):
    """Split families into same-sign / opposite-sign sub-families.

    Stores on the table: varphi (N,2) volume fractions per side,
    omega0_side (N,2) and omega0 (N,) influence-weighted volumes over
    intact bonds, and omega0_all (N,) over all listed bonds (the damage
    denominator). For bulk points varphi = (1, 0) and side 0 carries the
    whole family.
    """
    own = family.owner
    v_nb = volumes[family.idx]
    side1 = family.alpha.astype(bool)

    vol_all = segment_sum(v_nb, family.ptr)
    vol_s1 = segment_sum(np.where(side1, v_nb, 0.0), family.ptr)
    with np.errstate(invalid="ignore", divide="ignore"):
        phi2 = np.where(vol_all > 0.0, vol_s1 / vol_all, 0.0)
    varphi = np.stack([1.0 - phi2, phi2], axis=1)

    w_eff = family.omega * family.intact * v_nb
    w_all = family.omega * v_nb
    omega0_s1 = segment_sum(np.where(side1, w_eff, 0.0), family.ptr)
    omega0 = segment_sum(w_eff, family.ptr)
    omega0_all = segment_sum(w_all, family.ptr)
    family.varphi = varphi
    family.omega0_side = np.stack([omega0 - omega0_s1, omega0_s1], axis=1)
    family.omega0 = omega0
    family.omega0_all = omega0_all
    return varphi


def require_nonempty(family):
    counts = family.counts()
    if np.any(counts == 0):
        bad = np.flatnonzero(counts == 0)
        raise DegeneratePointError(
            f"{bad.size} point(s) have empty families", point_ids=bad
        )
