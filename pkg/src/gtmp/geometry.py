"""SE(3)-invariant branch features, rigid transforms, and reconstruction.

A full-length branch ``i -> j -> k -> p`` is summarized by six numbers:

    (d_ij, d_jk, d_jp, theta_ijk, theta_ijp, phi_ijkp)

built from the edge vectors ``P_xy := pos_y - pos_x``.  The two angles open
at ``j`` between ``P_ij`` and ``P_jk`` / ``P_jp``; the torsion ``phi`` is
the signed dihedral between the planes (i,j,k) and (i,j,p) about the
``P_ij`` axis, its sign given by the triple product of the two plane
normals against ``P_ij``.  All six quantities are invariant under rigid
motions, and together with three anchor points they pin down the fourth
point of the branch, which is what the reconstruction routines exploit.

Truncated branches and geometric degeneracies are represented by a
per-entry validity mask rather than errors: extraction must succeed on
real data.  Reconstruction, by contrast, raises on collinear anchors
because the constraint system genuinely loses rank there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    CollinearError,
    ContractError,
    InfeasibleError,
    NumericError,
    TransformError,
    UnreachableNodeError,
)
from .tree import Branch3, GeometricTree, enumerate_branches

FEATURE_NAMES = ("d_ij", "d_jk", "d_jp", "theta_ijk", "theta_ijp", "phi_ijkp")

# Relative threshold below which cross products count as collinear.
COLLINEAR_TOL = 1e-9
# Absolute length below which a vector cannot be normalized.
TINY_LENGTH = 1e-9


@dataclass
class BranchFeatures:
    """Six branch features plus a per-entry validity mask.

    ``values`` follows FEATURE_NAMES order; masked-out entries are zero.
    Distances are in the source length unit, angles in radians within
    [0, pi], torsion within [-pi, pi].
    """

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != (6,) or self.mask.shape != (6,):
            raise ContractError("BranchFeatures needs 6 values and 6 mask bits")

    def __getitem__(self, name: str) -> float:
        return float(self.values[FEATURE_NAMES.index(name)])

    def defined(self, name: str) -> bool:
        return bool(self.mask[FEATURE_NAMES.index(name)])


def _unit(v: np.ndarray) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(v))
    if n < TINY_LENGTH:
        return v, 0.0
    return v / n, n


def _angle(a: np.ndarray, na: float, b: np.ndarray, nb: float) -> float:
    cos = float(np.dot(a, b) / (na * nb))
    return math.acos(min(1.0, max(-1.0, cos)))


def extract_branch_features(pos_i, pos_j, pos_k=None, pos_p=None,
                            valid_len: int = 3) -> BranchFeatures:
    """Features of one branch; padded slots may pass ``None``.

    Entries whose defining nodes are padding are zero with mask False, as is
    the torsion when either plane normal degenerates (collinear triple).
    """
    if valid_len not in (1, 2, 3):
        raise ContractError(f"valid_len must be 1..3, got {valid_len}")
    used = [pos_i, pos_j] + ([pos_k] if valid_len >= 2 else []) \
        + ([pos_p] if valid_len >= 3 else [])
    pts = []
    for p in used:
        arr = np.asarray(p, dtype=np.float64)
        if arr.shape != (3,) or not np.isfinite(arr).all():
            raise NumericError("branch positions must be finite 3-vectors")
        pts.append(arr)

    values = np.zeros(6)
    mask = np.zeros(6, dtype=bool)

    pi, pj = pts[0], pts[1]
    pij = pj - pi
    d_ij = float(np.linalg.norm(pij))
    values[0], mask[0] = d_ij, True

    if valid_len >= 2:
        pk = pts[2]
        pjk = pk - pj
        d_jk = float(np.linalg.norm(pjk))
        values[1], mask[1] = d_jk, True
        if d_ij >= TINY_LENGTH and d_jk >= TINY_LENGTH:
            values[3], mask[3] = _angle(pij, d_ij, pjk, d_jk), True

    if valid_len >= 3:
        pp = pts[3]
        pjp = pp - pj
        d_jp = float(np.linalg.norm(pjp))
        values[2], mask[2] = d_jp, True
        if d_ij >= TINY_LENGTH and d_jp >= TINY_LENGTH:
            values[4], mask[4] = _angle(pij, d_ij, pjp, d_jp), True
        if mask[3] and mask[4]:
            cross_k = np.cross(pij, pjk)
            cross_p = np.cross(pij, pjp)
            nk = float(np.linalg.norm(cross_k))
            np_ = float(np.linalg.norm(cross_p))
            if nk >= COLLINEAR_TOL * d_ij * values[1] and \
               np_ >= COLLINEAR_TOL * d_ij * d_jp:
                n_ijk = cross_k / nk
                n_ijp = cross_p / np_
                cos = float(np.dot(n_ijk, n_ijp))
                magnitude = math.acos(min(1.0, max(-1.0, cos)))
                nxn = np.cross(n_ijk, n_ijp)
                nxn_norm = float(np.linalg.norm(nxn))
                if nxn_norm < 1e-12:
                    # Coplanar: torsion is exactly 0 or pi, sign immaterial.
                    sign = 1.0
                else:
                    sign = math.copysign(1.0, float(np.dot(nxn / nxn_norm, pij / d_ij)))
                values[5], mask[5] = sign * magnitude, True
    return BranchFeatures(values, mask)


def extract_branch_arrays(tree: GeometricTree,
                          branches: Optional[dict[int, list[Branch3]]] = None
                          ) -> tuple[list[Branch3], np.ndarray, np.ndarray]:
    """Flatten a tree's branches and extract features for all of them.

    Returns the flat branch list (grouped by origin node in node order) and
    the (B, 6) value / mask matrices.  Matches the scalar extractor.
    """
    if branches is None:
        branches = enumerate_branches(tree)
    flat = [b for node in tree.nodes for b in branches[node.id]]
    values = np.zeros((len(flat), 6))
    mask = np.zeros((len(flat), 6), dtype=bool)
    pos = {n.id: n.position for n in tree.nodes}
    for row, b in enumerate(flat):
        f = extract_branch_features(
            pos[b.i], pos[b.j],
            pos[b.k] if b.valid_len >= 2 else None,
            pos[b.p] if b.valid_len >= 3 else None,
            b.valid_len,
        )
        values[row] = f.values
        mask[row] = f.mask
    return flat, values, mask


def extract_tree_features(tree: GeometricTree
                          ) -> dict[Branch3, BranchFeatures]:
    """Branch -> features mapping for every branch of the tree."""
    flat, values, mask = extract_branch_arrays(tree)
    return {b: BranchFeatures(values[r], mask[r]) for r, b in enumerate(flat)}


# -- rigid transforms -------------------------------------------------------

@dataclass
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise TransformError("need a 3x3 rotation and a 3-vector translation")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-12:
            raise TransformError(f"rotation not orthonormal (|R^T R - I| = {err:.2e})")
        det = float(np.linalg.det(self.rotation))
        if abs(det - 1.0) > 1e-12:
            raise TransformError(f"rotation must have det +1, got {det!r}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def apply_rigid(tree: GeometricTree, transform: RigidTransform) -> GeometricTree:
    """Map every position through the transform; topology/attrs unchanged."""
    if not isinstance(transform, RigidTransform):
        transform = RigidTransform(*transform)
    return tree.with_positions(transform.apply(tree.positions()))


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(seed: int) -> RigidTransform:
    """Rotation drawn uniformly from SO(3) (normalized random quaternion)."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=4)
    while np.linalg.norm(q) < 1e-8:
        q = rng.normal(size=4)
    return RigidTransform(rotation_from_quaternion(q), np.zeros(3))


def axis_angle_rotation(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about ``axis`` by ``angle`` radians."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n < TINY_LENGTH:
        raise TransformError("rotation axis must be nonzero")
    a = a / n
    kx = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * kx + (1 - math.cos(angle)) * (kx @ kx)


def random_rigid(seed: int, rotation_angle: Optional[float] = None,
                 translation: float = 0.0) -> RigidTransform:
    """Random transform with controlled magnitudes (for robustness sweeps).

    ``rotation_angle`` fixes the rotation angle about a random axis (None
    means uniform over SO(3)); ``translation`` fixes the shift distance
    along a random direction.
    """
    rng = np.random.default_rng(seed)
    if rotation_angle is None:
        q = rng.normal(size=4)
        rot = rotation_from_quaternion(q)
    else:
        axis = rng.normal(size=3)
        while np.linalg.norm(axis) < 1e-8:
            axis = rng.normal(size=3)
        rot = axis_angle_rotation(axis, rotation_angle)
    shift = np.zeros(3)
    if translation != 0.0:
        direction = rng.normal(size=3)
        while np.linalg.norm(direction) < 1e-8:
            direction = rng.normal(size=3)
        shift = translation * direction / np.linalg.norm(direction)
    return RigidTransform(rot, shift)


# -- reconstruction ---------------------------------------------------------

def _feature_residual(candidate: BranchFeatures, target: BranchFeatures) -> float:
    """Max abs deviation over entries defined in ``target``.

    Torsion compares on the circle so +pi and -pi coincide.
    """
    err = 0.0
    for idx in range(6):
        if not target.mask[idx]:
            continue
        if not candidate.mask[idx]:
            return math.inf
        d = abs(candidate.values[idx] - target.values[idx])
        if idx == 5:
            d = min(d, 2 * math.pi - d)
        err = max(err, d)
    return err


def _solve_missing_top(pos_j: np.ndarray, pos_k: np.ndarray, pos_p: np.ndarray,
                       feats: BranchFeatures, atol: float) -> np.ndarray:
    """Place node ``i`` of a branch from its three descendants.

    Solves the constraint system: d_ij fixes a sphere around j, the two
    angles fix the direction cosines against the (k, p) frame, and the
    torsion sign picks one of the two mirror points through the (j,k,p)
    plane.
    """
    for name in ("d_ij", "theta_ijk", "theta_ijp"):
        if not feats.defined(name):
            raise InfeasibleError(f"cannot place top node without {name}")

    ejk = pos_k - pos_j
    ejp = pos_p - pos_j
    njk = float(np.linalg.norm(ejk))
    njp = float(np.linalg.norm(ejp))
    cross_norm = float(np.linalg.norm(np.cross(ejk, ejp)))
    if njk < TINY_LENGTH or njp < TINY_LENGTH or \
            cross_norm < COLLINEAR_TOL * njk * njp:
        raise CollinearError("anchors j, k, p are collinear")

    e1 = ejk / njk
    proj = float(np.dot(ejp, e1))
    u2 = ejp - proj * e1
    e2 = u2 / np.linalg.norm(u2)
    e3 = np.cross(e1, e2)
    cos_b = proj / njp
    sin_b = float(np.linalg.norm(u2)) / njp

    d_ij = feats["d_ij"]
    c1 = -math.cos(feats["theta_ijk"])
    c2 = (-math.cos(feats["theta_ijp"]) - c1 * cos_b) / sin_b
    rem = 1.0 - c1 * c1 - c2 * c2
    if rem < -1e-9:
        raise InfeasibleError(
            f"angles imply |direction| > 1 (excess {-rem:.3e}): no placement exists")
    w3 = math.sqrt(max(rem, 0.0))

    in_plane = pos_j + d_ij * (c1 * e1 + c2 * e2)
    offsets = [w3, -w3] if w3 > 1e-12 else [0.0]
    if not feats.defined("phi_ijkp") and len(offsets) > 1:
        raise CollinearError("torsion undefined but placement is out of plane")

    best, best_err = None, math.inf
    for off in offsets:
        cand = in_plane + d_ij * off * e3
        got = extract_branch_features(cand, pos_j, pos_k, pos_p, 3)
        err = _feature_residual(got, feats)
        if err < best_err:
            best, best_err = cand, err
    if best is None or best_err > atol:
        raise InfeasibleError(
            f"no placement reproduces the features (best residual {best_err:.3e})")
    return best


def _solve_missing_bottom(pos_i: np.ndarray, pos_j: np.ndarray,
                          pos_k: np.ndarray, feats: BranchFeatures,
                          atol: float) -> np.ndarray:
    """Place node ``p`` of a branch from its three ancestors.

    In the frame (a = P_ij direction, m = n_ijk x a, n_ijk), the direction
    from j to p is cos(theta) a + sin(theta) (cos(phi) m + sin(phi) n_ijk);
    this reproduces both the dihedral magnitude and its sign convention.
    """
    for name in ("d_jp", "theta_ijp"):
        if not feats.defined(name):
            raise InfeasibleError(f"cannot place bottom node without {name}")

    pij = pos_j - pos_i
    d_ij = float(np.linalg.norm(pij))
    if d_ij < TINY_LENGTH:
        raise CollinearError("anchors i and j coincide")
    a = pij / d_ij

    theta = feats["theta_ijp"]
    d_jp = feats["d_jp"]
    if math.sin(theta) < COLLINEAR_TOL:
        # p sits on the P_ij axis; no torsion needed.
        cand = pos_j + d_jp * math.cos(theta) * a
    else:
        pjk = pos_k - pos_j
        raw = np.cross(pij, pjk)
        raw_norm = float(np.linalg.norm(raw))
        if raw_norm < COLLINEAR_TOL * d_ij * float(np.linalg.norm(pjk)):
            raise CollinearError("anchors i, j, k are collinear")
        if not feats.defined("phi_ijkp"):
            raise CollinearError("torsion undefined but placement is off axis")
        n_ijk = raw / raw_norm
        m = np.cross(n_ijk, a)
        phi = feats["phi_ijkp"]
        w = math.cos(theta) * a + math.sin(theta) * (
            math.cos(phi) * m + math.sin(phi) * n_ijk)
        cand = pos_j + d_jp * w

    got = extract_branch_features(pos_i, pos_j, pos_k, cand, 3)
    err = _feature_residual(got, feats)
    if err > atol:
        raise InfeasibleError(
            f"no placement reproduces the features (residual {err:.3e})")
    return cand


def reconstruct_node(pos_j, pos_k, pos_p, feats: BranchFeatures,
                     atol: float = 1e-6) -> np.ndarray:
    """Recover the branch-top position from three anchors and full features.

    Anchors must be non-collinear and the features fully defined; the
    returned point reproduces the features to well below ``atol``.
    """
    if not feats.mask.all():
        raise InfeasibleError("reconstruct_node requires fully defined features")
    pj = np.asarray(pos_j, dtype=np.float64)
    pk = np.asarray(pos_k, dtype=np.float64)
    pp = np.asarray(pos_p, dtype=np.float64)
    return _solve_missing_top(pj, pk, pp, feats, atol)


def reconstruct_tree(tree: GeometricTree,
                     features: Mapping[Branch3, BranchFeatures],
                     seed_ids: Sequence[int],
                     seed_positions: Optional[Sequence[np.ndarray]] = None,
                     atol: float = 1e-4) -> dict[int, np.ndarray]:
    """Recover all coordinates from branch features and one seeded triple.

    ``seed_ids`` = (j, k, p) must be consecutive (k child of j, p child of
    k) and non-collinear.  Placement first climbs the ancestor chain of j
    (each step solves the branch top from three known descendants), then
    walks down in depth order solving each node from its three known
    ancestors.  Trees whose depth-1 or depth-2 level is not unique leave
    floating subtrees whose orientation the features do not pin down; those
    nodes raise UnreachableNodeError.
    """
    if len(seed_ids) != 3:
        raise ContractError("seed triple must name exactly three nodes")
    j_id, k_id, p_id = (int(s) for s in seed_ids)
    if tree.parent_of(k_id) != j_id or tree.parent_of(p_id) != k_id:
        raise ContractError("seed triple must be a consecutive descending chain")

    if seed_positions is None:
        seed_positions = [tree.node(n).position for n in (j_id, k_id, p_id)]
    known: dict[int, np.ndarray] = {
        nid: np.asarray(p, dtype=np.float64)
        for nid, p in zip((j_id, k_id, p_id), seed_positions)
    }
    cross = np.cross(known[k_id] - known[j_id], known[p_id] - known[j_id])
    scale = np.linalg.norm(known[k_id] - known[j_id]) * \
        np.linalg.norm(known[p_id] - known[j_id])
    if np.linalg.norm(cross) < COLLINEAR_TOL * scale:
        raise CollinearError("seed triple is collinear")

    # Index the full-length branch that ends at each depth>=3 node.
    end3: dict[int, tuple[Branch3, BranchFeatures]] = {}
    for branch, f in features.items():
        if branch.valid_len == 3:
            end3[branch.p] = (branch, f)

    def features_ending_at(nid: int) -> BranchFeatures:
        if nid not in end3:
            raise UnreachableNodeError(
                f"no full-length branch features end at node {nid}")
        return end3[nid][1]

    # Climb from the seed chain to the root.
    chain = [j_id, k_id, p_id]
    while True:
        top = tree.parent_of(chain[0])
        if top is None or top in known:
            break
        f = features_ending_at(chain[2])
        known[top] = _solve_missing_top(
            known[chain[0]], known[chain[1]], known[chain[2]], f, atol)
        chain = [top, chain[0], chain[1]]

    # Walk down in depth order; each node needs its three nearest ancestors.
    order = sorted(tree.ids(), key=tree.depth_of)
    for nid in order:
        if nid in known or tree.depth_of(nid) < 3:
            continue
        k_anchor = tree.parent_of(nid)
        j_anchor = tree.parent_of(k_anchor)
        i_anchor = tree.parent_of(j_anchor)
        if any(a not in known for a in (i_anchor, j_anchor, k_anchor)):
            continue
        f = features_ending_at(nid)
        known[nid] = _solve_missing_bottom(
            known[i_anchor], known[j_anchor], known[k_anchor], f, atol)

    missing = [nid for nid in tree.ids() if nid not in known]
    if missing:
        raise UnreachableNodeError(
            f"propagation cannot place nodes {missing[:8]}"
            + ("..." if len(missing) > 8 else ""))
    return known
