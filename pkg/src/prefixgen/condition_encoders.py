"""Condition encoders producing the six prefix rows.

Row order is fixed: (Pocket, VINA, QED, SA, LogP, Lipinski). Property rows
come from one small MLP per property; the pocket row comes from a stack of
geometric vector layers followed by anchor-centred attention pooling.

Vector features are stored as (n, channels, 3) arrays and only ever mixed
along the channel axis, so every scalar output is invariant to rigid motions
and every vector output rotates with the input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as nd
from .molprops import PROPERTY_NAMES, PropVec
from .ndgrad import Tensor
from .prefix_attention import CONDITION_LABELS

POCKET_ELEMENTS = ("C", "N", "O", "S")  # anything else maps to an "other" slot
N_RBF = 16
RBF_MAX = 10.0
RBF_WIDTH = 0.625
ANCHOR_RADIUS = 5.0

# fixed input standardisation of each property, in native units
PROPERTY_SCALING = {
    "vina": (-2.0, 1.0),
    "qed": (0.5, 0.25),
    "sa": (0.6, 0.15),
    "logp": (2.0, 2.0),
    "lipinski": (4.5, 1.0),
}


class MissingAnchor(ValueError):
    pass


def rbf(dist: np.ndarray, n: int = N_RBF, d_max: float = RBF_MAX, width: float = RBF_WIDTH) -> np.ndarray:
    """Gaussian radial basis expansion with centres evenly spaced on [0, d_max]."""
    centers = np.linspace(0.0, d_max, n)
    dist = np.asarray(dist, dtype=np.float64)[..., None]
    return np.exp(-((dist - centers) ** 2) / (2 * width ** 2)).astype(nd.DTYPE)


# ---------------------------------------------------------------------------
# pocket graph


@dataclass
class PocketGraph:
    elements: list[str]
    coords: np.ndarray                     # (n, 3), angstrom
    ligand: np.ndarray | None = None       # (m, 3) reference points
    anchor_index: int | None = None
    k: int = 8
    node_s: np.ndarray = field(init=False)   # (n, 5) one-hot element
    node_v: np.ndarray = field(init=False)   # (n, 1, 3) offset to the centroid
    edge_index: np.ndarray = field(init=False)  # (E, 2) rows of (target, source)
    edge_s: np.ndarray = field(init=False)   # (E, N_RBF)
    edge_v: np.ndarray = field(init=False)   # (E, 1, 3) unit direction target -> source

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if self.ligand is not None:
            self.ligand = np.asarray(self.ligand, dtype=np.float64).reshape(-1, 3)
        n = len(self.coords)
        if n != len(self.elements) or n == 0:
            raise ValueError("pocket needs one element per coordinate and at least one atom")
        onehot = np.zeros((n, len(POCKET_ELEMENTS) + 1))
        for i, el in enumerate(self.elements):
            slot = POCKET_ELEMENTS.index(el) if el in POCKET_ELEMENTS else len(POCKET_ELEMENTS)
            onehot[i, slot] = 1.0
        self.node_s = onehot.astype(nd.DTYPE)
        self.node_v = (self.coords.mean(axis=0) - self.coords)[:, None, :].astype(nd.DTYPE)
        self.edge_index = knn_edges(self.coords, self.k)
        if len(self.edge_index):
            t, s = self.edge_index[:, 0], self.edge_index[:, 1]
            rel = self.coords[s] - self.coords[t]
            dist = np.linalg.norm(rel, axis=1)
            self.edge_s = rbf(dist)
            self.edge_v = (rel / np.maximum(dist, 1e-8)[:, None])[:, None, :].astype(nd.DTYPE)
        else:
            self.edge_s = np.zeros((0, N_RBF), nd.DTYPE)
            self.edge_v = np.zeros((0, 1, 3), nd.DTYPE)

    @property
    def n_nodes(self) -> int:
        return len(self.coords)

    def anchor_candidates(self) -> np.ndarray:
        if self.ligand is None or not len(self.ligand):
            return np.arange(0)
        d = np.linalg.norm(self.coords[:, None, :] - self.ligand[None, :, :], axis=-1)
        return np.nonzero((d <= ANCHOR_RADIUS).any(axis=1))[0]

    def choose_anchor(self, rng: np.random.Generator | None = None) -> int:
        """Explicit anchor, else a random node near the ligand (training) or the
        node nearest the ligand centroid (inference, ``rng=None``)."""
        if self.anchor_index is not None:
            return int(self.anchor_index)
        if self.ligand is None or not len(self.ligand):
            raise MissingAnchor("pocket has neither an anchor index nor ligand reference points")
        if rng is not None:
            cand = self.anchor_candidates()
            if len(cand):
                return int(cand[rng.integers(len(cand))])
        centroid = self.ligand.mean(axis=0)
        return int(np.argmin(np.linalg.norm(self.coords - centroid, axis=1)))

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "PocketGraph":
        rot = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        lig = None if self.ligand is None else self.ligand @ rot.T + t
        return PocketGraph(list(self.elements), self.coords @ rot.T + t, lig, self.anchor_index, self.k)

    @property
    def block_mask(self) -> None:
        return None


@dataclass
class GraphBatch:
    """Disjoint union of pocket graphs so one GVF pass serves a whole batch.

    ``block_mask`` keeps global attention inside each member graph, and
    ``offsets[i]`` is the first node of member ``i``.
    """
    node_s: np.ndarray
    node_v: np.ndarray
    edge_index: np.ndarray
    edge_s: np.ndarray
    edge_v: np.ndarray
    offsets: np.ndarray
    block_mask: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: list[PocketGraph]) -> "GraphBatch":
        sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        owner = np.repeat(np.arange(len(graphs)), sizes)
        return cls(np.concatenate([g.node_s for g in graphs]),
                   np.concatenate([g.node_v for g in graphs]),
                   np.concatenate([g.edge_index + o for g, o in zip(graphs, offsets)]),
                   np.concatenate([g.edge_s for g in graphs]),
                   np.concatenate([g.edge_v for g in graphs]),
                   offsets, owner[:, None] == owner[None, :])

    @property
    def n_nodes(self) -> int:
        return len(self.node_s)


def knn_edges(coords: np.ndarray, k: int) -> np.ndarray:
    """Symmetrised k-nearest-neighbour edges, sorted, as (target, source) pairs."""
    n = len(coords)
    if n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    d = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    kk = min(k, n - 1)
    pairs = set()
    for i in range(n):
        # stable sort so ties resolve by index
        for j in np.argsort(d[i], kind="stable")[:kk]:
            pairs.add((i, int(j)))
            pairs.add((int(j), i))
    return np.array(sorted(pairs), dtype=np.int64)


def read_pocket(path, k: int = 8) -> PocketGraph:
    """Plain-text point cloud: ``ELEMENT X Y Z`` lines, '#' comments, and
    ligand reference points after a ``LIGAND`` line."""
    elements, coords, ligand = [], [], []
    in_ligand = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.upper() == "LIGAND":
                in_ligand = True
                continue
            parts = line.split()
            try:
                xyz = [float(v) for v in parts[-3:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'ELEMENT X Y Z'") from None
            if in_ligand:
                if len(parts) not in (3, 4):
                    raise ValueError(f"{path}:{lineno}: bad ligand line")
                ligand.append(xyz)
            else:
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected 'ELEMENT X Y Z'")
                elements.append(parts[0])
                coords.append(xyz)
    return PocketGraph(elements, np.array(coords), np.array(ligand) if ligand else None, k=k)


def write_pocket(path, pocket: PocketGraph):
    with open(path, "w") as fh:
        fh.write("# element x y z\n")
        for el, (x, y, z) in zip(pocket.elements, pocket.coords):
            fh.write(f"{el} {x:.4f} {y:.4f} {z:.4f}\n")
        if pocket.ligand is not None:
            fh.write("LIGAND\n")
            for x, y, z in pocket.ligand:
                fh.write(f"X {x:.4f} {y:.4f} {z:.4f}\n")


# ---------------------------------------------------------------------------
# geometric layers


def _vnorm(v: Tensor, eps: float = 1e-8) -> Tensor:
    """Channel-wise L2 norm of (n, c, 3) vectors -> (n, c)."""
    return nd.sqrt(nd.add_const(nd.sum_(nd.square(v), axis=-1), eps))


def _vmix(v: Tensor, w: Tensor) -> Tensor:
    """Mix vector channels: (n, c_in, 3) x (c_in, c_out) -> (n, c_out, 3)."""
    n = v.shape[0]
    vt = nd.transpose(v, (0, 2, 1))                      # (n, 3, c_in)
    out = nd.linear(vt, w)                               # (n, 3, c_out)
    return nd.transpose(out, (0, 2, 1)) if n else nd.reshape(out, (0, w.shape[1], 3))


def _gate(v: Tensor, g: Tensor) -> Tensor:
    """Scale each vector channel by a scalar: (n, c, 3) * (n, c)."""
    return nd.mul(v, nd.expand(nd.reshape(g, g.shape + (1,)), v.shape))


class GVP(nd.Module):
    """Geometric vector perceptron on (scalar, vector) feature pairs."""

    def __init__(self, rng, in_dims, out_dims, scalar_act=True, vector_act=True):
        si, vi = in_dims
        so, vo = out_dims
        self.si, self.vi, self.so, self.vo = si, vi, so, vo
        self.h = max(vi, vo)
        self.scalar_act = scalar_act
        self.vector_act = vector_act
        self.wh = nd.param(rng, (vi, self.h))
        self.ws = nd.param(rng, (si + self.h, so))
        self.bs = nd.param(rng, (so,), zeros=True)
        self.wv = nd.param(rng, (self.h, vo))

    def __call__(self, s: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        vh = _vmix(v, self.wh)
        s_out = nd.linear(nd.concat([s, _vnorm(vh)], axis=-1), self.ws, self.bs)
        if self.scalar_act:
            s_out = nd.relu(s_out)
        v_out = _vmix(vh, self.wv)
        if self.vector_act:
            v_out = _gate(v_out, nd.sigmoid(_vnorm(v_out)))
        return s_out, v_out


class MLP(nd.Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, rng, d_in, d_hidden, d_out):
        self.w1 = nd.param(rng, (d_in, d_hidden))
        self.b1 = nd.param(rng, (d_hidden,), zeros=True)
        self.w2 = nd.param(rng, (d_hidden, d_out))
        self.b2 = nd.param(rng, (d_out,), zeros=True)

    def __call__(self, x):
        return nd.linear(nd.relu(nd.linear(x, self.w1, self.b1)), self.w2, self.b2)


def _vector_rms_norm(v: Tensor, eps: float = 1e-8) -> Tensor:
    n, c, _ = v.shape
    sq = nd.mean(nd.sum_(nd.square(v), axis=-1), axis=-1, keepdims=True)   # (n, 1)
    rms = nd.sqrt(nd.add_const(sq, eps))
    return nd.div(v, nd.expand(nd.reshape(rms, (n, 1, 1)), v.shape))


class GVFLayer(nd.Module):
    """Local GVP message passing followed by rotation-invariant global attention."""

    def __init__(self, rng, d_f: int, d_e: int, c_v: int, c_att: int | None = None):
        self.d_f, self.d_e, self.c_v = d_f, d_e, c_v
        self.c_att = c_att or c_v
        self.g_v = GVP(rng, (d_f, c_v), (d_f, c_v))
        self.g_e = GVP(rng, (d_e, 1), (d_e, c_v))
        self.mlp1 = MLP(rng, d_e, d_e, d_f)
        self.mlp2 = MLP(rng, d_e, d_e, c_v)
        self.mlp3 = MLP(rng, d_f, d_f, c_v)
        self.g_m = GVP(rng, (d_f, c_v), (d_f, c_v))
        self.ln_g = nd.param(rng, (d_f,), ones=True)
        self.ln_b = nd.param(rng, (d_f,), zeros=True)
        self.att_q = nd.param(rng, (c_v, self.c_att))
        self.att_k = nd.param(rng, (c_v, self.c_att))
        self.ffn_v = MLP(rng, d_f, 2 * d_f, d_f)
        self.ffn_e = MLP(rng, 2 * d_f + d_e, 2 * d_e, d_e)

    def message_passing(self, g: PocketGraph, s, v, e):
        n, E = g.n_nodes, len(g.edge_index)
        sv, vv = self.g_v(s, v)
        if E == 0:
            m_s = Tensor(np.zeros((n, self.d_f), dtype=sv.data.dtype))
            m_v = Tensor(np.zeros((n, self.c_v, 3), dtype=vv.data.dtype))
        else:
            tgt, src = g.edge_index[:, 0], g.edge_index[:, 1]
            es, ev = self.g_e(e, Tensor(g.edge_v))
            vj = nd.embed(sv, src)                                         # (E, d_f)
            vvj = nd.reshape(nd.embed(nd.reshape(vv, (n, -1)), src), (E, self.c_v, 3))
            m = nd.mul(vj, self.mlp1(es))
            mv = nd.add(_gate(vvj, self.mlp2(es)), _gate(ev, self.mlp3(vj)))
            m, mv = self.g_m(m, mv)
            incidence = np.zeros((n, E), dtype=nd.DTYPE)
            incidence[tgt, np.arange(E)] = 1.0
            inc = Tensor(incidence)
            m_s = nd.matmul(inc, m)
            m_v = nd.reshape(nd.matmul(inc, nd.reshape(mv, (E, -1))), (n, self.c_v, 3))
        s_new = nd.layer_norm(nd.add(s, m_s), self.ln_g, self.ln_b)
        v_new = _vector_rms_norm(nd.add(v, m_v))
        return s_new, v_new

    def global_attention(self, v: Tensor, block: np.ndarray | None = None) -> Tensor:
        n = v.shape[0]
        q = nd.reshape(_vmix(v, self.att_q), (n, -1))
        k = nd.reshape(_vmix(v, self.att_k), (n, -1))
        logits = nd.scale(nd.matmul(q, nd.transpose(k)), 1.0 / np.sqrt(self.c_att))
        if block is not None:
            logits = nd.masked_fill(logits, block, -np.inf)
        return nd.softmax(logits)

    def __call__(self, g: PocketGraph | GraphBatch, s, v, e):
        s, v = self.message_passing(g, s, v, e)
        a = self.global_attention(v, g.block_mask)
        a_s = nd.matmul(a, s)
        s_out = self.ffn_v(a_s)
        if len(g.edge_index):
            tgt, src = g.edge_index[:, 0], g.edge_index[:, 1]
            e = self.ffn_e(nd.concat([nd.embed(a_s, tgt), nd.embed(a_s, src), e], axis=-1))
        return s_out, v, e


class PocketEncoder(nd.Module):
    def __init__(self, rng, d: int, d_f: int = 64, d_e: int = 32, c_v: int = 8, n_layers: int = 3,
                 att_hidden: int = 32):
        self.d_f, self.d_e, self.c_v = d_f, d_e, c_v
        self.node_in = GVP(rng, (len(POCKET_ELEMENTS) + 1, 1), (d_f, c_v))
        self.edge_w = nd.param(rng, (N_RBF, d_e))
        self.edge_b = nd.param(rng, (d_e,), zeros=True)
        self.layers = [GVFLayer(rng, d_f, d_e, c_v) for _ in range(n_layers)]
        self.att = MLP(rng, N_RBF + 2 * d_f, att_hidden, 1)
        self.out_w = nd.param(rng, (d_f, d))
        self.out_b = nd.param(rng, (d,), zeros=True)

    def node_features(self, g: PocketGraph | GraphBatch):
        """Run the GVF stack; returns final scalar and vector node features."""
        s, v = self.node_in(Tensor(g.node_s), Tensor(g.node_v))
        e = nd.linear(Tensor(g.edge_s), self.edge_w, self.edge_b)
        for layer in self.layers:
            s, v, e = layer(g, s, v, e)
        return s, v

    def anchor_weights(self, g: PocketGraph, s: Tensor, anchor: int) -> Tensor:
        n = g.n_nodes
        dist = np.linalg.norm(g.coords - g.coords[anchor], axis=1)
        vi = nd.expand(nd.getitem(s, slice(anchor, anchor + 1)), (n, self.d_f))
        feats = nd.concat([Tensor(rbf(dist)), vi, s], axis=-1)
        logits = nd.reshape(self.att(feats), (1, n))
        return nd.softmax(logits)

    def pool(self, g: PocketGraph, s: Tensor, anchor: int) -> Tensor:
        """sum_j softmax_j(MLP_att(rbf(d_ij) || v_i || v_j)) * v_i, projected to width d."""
        n = g.n_nodes
        w = self.anchor_weights(g, s, anchor)
        vi = nd.expand(nd.getitem(s, slice(anchor, anchor + 1)), (n, self.d_f))
        h = nd.reshape(nd.matmul(w, vi), (self.d_f,))
        return nd.add_bias(nd.linear(nd.reshape(h, (1, self.d_f)), self.out_w), self.out_b)[0]

    def __call__(self, g: PocketGraph, anchor: int | None = None, rng=None) -> Tensor:
        if anchor is None:
            anchor = g.choose_anchor(rng)
        s, _ = self.node_features(g)
        return self.pool(g, s, anchor)


# ---------------------------------------------------------------------------
# property embeddings and prefix assembly


class PropertyMLP(nd.Module):
    """Scalar property -> d-dim row: Linear(1, hidden) -> ReLU -> Linear(hidden, d)."""

    def __init__(self, rng, d: int, hidden: int = 64, shift: float = 0.0, scale: float = 1.0):
        self.shift = float(shift)
        self.scale_ = float(scale)
        self.w1 = nd.param(rng, (1, hidden), std=1.0)
        self.b1 = nd.param(rng, (hidden,), std=0.5)
        self.w2 = nd.param(rng, (hidden, d))
        self.b2 = nd.param(rng, (d,), zeros=True)

    def __call__(self, values) -> Tensor:
        x = (np.asarray(values, dtype=np.float64).reshape(-1, 1) - self.shift) / self.scale_
        h = nd.relu(nd.linear(Tensor(x.astype(self.w1.data.dtype)), self.w1, self.b1))
        return nd.linear(h, self.w2, self.b2)


@dataclass
class PrefixMatrix:
    rows: Tensor                   # (n_c, d) or batched (B, n_c, d)
    labels: tuple[str, ...] = CONDITION_LABELS


def assemble_prefix(rows: dict[str, Tensor]) -> PrefixMatrix:
    """Stack condition rows in the canonical (Pocket, VINA, QED, SA, LogP, Lipinski) order."""
    missing = [lbl for lbl in CONDITION_LABELS if lbl not in rows]
    if missing:
        raise KeyError(f"missing prefix rows: {missing}")
    stacked = nd.concat([nd.reshape(rows[lbl], (1, -1)) for lbl in CONDITION_LABELS], axis=0)
    return PrefixMatrix(stacked)


class ConditionEncoder(nd.Module):
    def __init__(self, rng, d: int, pocket_kwargs: dict | None = None, prop_hidden: int = 64):
        self.d = d
        self.pocket = PocketEncoder(rng, d, **(pocket_kwargs or {}))
        self.props = [PropertyMLP(rng, d, prop_hidden, *PROPERTY_SCALING[name])
                      for name in PROPERTY_NAMES]
        self.null = nd.param(rng, (len(CONDITION_LABELS), d), std=0.5)

    def null_row(self, i: int) -> Tensor:
        return nd.getitem(self.null, i)

    def embed_properties(self, conds: list[PropVec], drop: np.ndarray | None = None) -> list[Tensor]:
        """Property rows for a batch: five (B, d) tensors, null rows where masked or dropped.

        ``drop`` is an optional (B, 5) boolean array of extra masks (condition dropout).
        """
        B = len(conds)
        present = np.array([c.mask for c in conds], dtype=bool).reshape(B, len(PROPERTY_NAMES))
        if drop is not None:
            present &= ~np.asarray(drop, dtype=bool)
        out = []
        for k, (name, net) in enumerate(zip(PROPERTY_NAMES, self.props)):
            keep = present[:, k]
            null = nd.expand(nd.getitem(self.null, slice(k + 1, k + 2)), (B, self.d))
            if not keep.any():
                out.append(null)
                continue
            vals = [getattr(c, name) if keep[b] else 0.0 for b, c in enumerate(conds)]
            emb = net(vals)
            if keep.all():
                out.append(emb)
                continue
            m = np.repeat(keep[:, None], self.d, axis=1).astype(emb.data.dtype)
            out.append(nd.add(nd.mul(emb, Tensor(m, dtype=m.dtype)),
                              nd.mul(null, Tensor(1.0 - m, dtype=m.dtype))))
        return out

    def embed_pockets(self, pockets: list[PocketGraph | None], anchors: list[int | None] | None = None,
                      rng=None, drop: np.ndarray | None = None) -> Tensor:
        """(B, d) pocket rows; one GVF pass covers every distinct pocket object."""
        B = len(pockets)
        anchors = anchors or [None] * B
        used = [b for b, g in enumerate(pockets) if g is not None and not (drop is not None and drop[b])]
        slot: dict[int, int] = {}
        distinct: list[PocketGraph] = []
        for b in used:
            if id(pockets[b]) not in slot:
                slot[id(pockets[b])] = len(distinct)
                distinct.append(pockets[b])
        feats = []
        if len(distinct) == 1:
            feats = [self.pocket.node_features(distinct[0])[0]]
        elif distinct:
            batch = GraphBatch.from_graphs(distinct)
            s_all, _ = self.pocket.node_features(batch)
            ends = list(batch.offsets[1:]) + [batch.n_nodes]
            feats = [nd.getitem(s_all, slice(int(a), int(b))) for a, b in zip(batch.offsets, ends)]
        rows = []
        for b, g in enumerate(pockets):
            if b not in used:
                rows.append(nd.reshape(self.null_row(0), (1, self.d)))
                continue
            a = anchors[b] if anchors[b] is not None else g.choose_anchor(rng)
            rows.append(nd.reshape(self.pocket.pool(g, feats[slot[id(g)]], a), (1, self.d)))
        return nd.concat(rows, axis=0)

    def __call__(self, conds: list[PropVec], pockets: list[PocketGraph | None] | None = None,
                 anchors=None, rng=None, drop: np.ndarray | None = None) -> Tensor:
        """Batched prefix: (B, 6, d). ``drop`` is an optional (B, 6) dropout mask."""
        B = len(conds)
        pockets = pockets if pockets is not None else [None] * B
        p1 = self.embed_pockets(pockets, anchors, rng, None if drop is None else drop[:, 0])
        rest = self.embed_properties(conds, None if drop is None else drop[:, 1:])
        rows = [nd.reshape(r, (B, 1, self.d)) for r in [p1] + rest]
        return nd.concat(rows, axis=1)

    def prefix(self, cond: PropVec, pocket: PocketGraph | None = None, anchor=None) -> PrefixMatrix:
        """Single-example prefix in canonical order."""
        rows = self([cond], [pocket], [anchor])
        return PrefixMatrix(nd.reshape(rows, rows.shape[1:]))
