"""Prefix-conditional decoder-only language model over SMILES tokens."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import ndgrad as nd
from .condition_encoders import ConditionEncoder, PrefixMatrix
from .molprops import PROPERTY_NAMES
from .ndgrad import Tensor
from .prefix_attention import AttentionWeights, transformer_block
from .smiles import Vocab

CHECKPOINT_VERSION = 1
N_CONDITIONS = 6


class SequenceTooLong(ValueError):
    pass


class VocabMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d: int = 128
    n_heads: int = 4
    n_layers: int = 4
    max_len: int = 128
    n_c: int = N_CONDITIONS
    seed: int = 0
    pocket_d_f: int = 64
    pocket_d_e: int = 32
    pocket_c_v: int = 8
    pocket_layers: int = 3

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")
        if self.max_len < 2:
            raise ValueError("max_len must be at least 2")
        if self.n_c != N_CONDITIONS:
            raise ValueError("this model uses exactly six condition rows")

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


class PrefixLM(nd.Module):
    def __init__(self, config: ModelConfig, vocab: Vocab):
        if len(vocab) != config.vocab_size:
            raise VocabMismatch(f"vocab has {len(vocab)} tokens, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.seed)
        d = config.d
        self.tok_emb = nd.param(rng, (config.vocab_size, d), std=0.02 * np.sqrt(d))
        self.pos_emb = nd.param(rng, (config.max_len, d), std=0.02 * np.sqrt(d))
        self.blocks = [AttentionWeights.init(rng, d, config.n_heads) for _ in range(config.n_layers)]
        self.lm_w = nd.param(rng, (d, config.vocab_size))
        self.lm_b = nd.param(rng, (config.vocab_size,), zeros=True)
        self.head_w1 = nd.param(rng, (d, d))
        self.head_b1 = nd.param(rng, (d,), zeros=True)
        self.head_w2 = nd.param(rng, (d, len(PROPERTY_NAMES)))
        self.head_b2 = nd.param(rng, (len(PROPERTY_NAMES),), zeros=True)
        self.conditions = ConditionEncoder(
            rng, d, dict(d_f=config.pocket_d_f, d_e=config.pocket_d_e, c_v=config.pocket_c_v,
                         n_layers=config.pocket_layers))

    # -- forward ------------------------------------------------------------

    def _check_ids(self, ids: np.ndarray):
        if ids.shape[-1] > self.config.max_len:
            raise SequenceTooLong(f"{ids.shape[-1]} tokens > max_len {self.config.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise VocabMismatch("token id outside the model vocabulary")

    def run_blocks(self, x: Tensor, return_maps: bool = False, dropout: float = 0.0, rng=None):
        maps = []
        for w in self.blocks:
            x, m = transformer_block(x, w, return_maps=True, dropout=dropout, rng=rng)
            maps.append(m)
        return (x, maps) if return_maps else x

    def forward_batch(self, prefix, ids, return_maps: bool = False, dropout: float = 0.0, rng=None):
        """Batched forward.

        prefix: (B, n_c, d) tensor; ids: (B, l) int array (BOS first, right-padded).
        Returns logits (B, l, V) and hiddens (B, n_c + l, d) (plus per-layer maps).
        ``dropout`` with an ``rng`` regularises training; inference leaves both unset.
        """
        prefix = prefix.rows if isinstance(prefix, PrefixMatrix) else nd.as_tensor(prefix)
        ids = np.asarray(ids, dtype=np.int64)
        self._check_ids(ids)
        B, l = ids.shape
        if prefix.shape != (B, self.config.n_c, self.config.d):
            raise nd.ShapeMismatch("prefix", prefix.shape, (B, self.config.n_c, self.config.d))
        tok = nd.embed(self.tok_emb, ids)
        pos = nd.expand(nd.getitem(self.pos_emb, slice(0, l)), (B, l, self.config.d))
        x = nd.concat([prefix, nd.dropout(nd.add(tok, pos), dropout, rng)], axis=1)
        h, maps = self.run_blocks(x, return_maps=True, dropout=dropout, rng=rng)
        nc = self.config.n_c
        tokens_h = nd.getitem(h, (slice(None), slice(nc, None)))
        logits = nd.linear(tokens_h, self.lm_w, self.lm_b)
        return (logits, h, maps) if return_maps else (logits, h)

    def forward(self, prefix, ids, return_maps: bool = False):
        """Single sequence: prefix (n_c, d), ids (l,) -> logits (l, V), hiddens (n_c + l, d)."""
        rows = prefix.rows if isinstance(prefix, PrefixMatrix) else nd.as_tensor(prefix)
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or (ids.size and ids[0] != self.vocab.bos_id):
            raise ValueError("ids must be a 1-d sequence starting with BOS")
        out = self.forward_batch(nd.reshape(rows, (1,) + rows.shape), ids[None, :], return_maps)
        logits, h = nd.reshape(out[0], out[0].shape[1:]), nd.reshape(out[1], out[1].shape[1:])
        if return_maps:
            return logits, h, [nd.reshape(m, m.shape[1:]) for m in out[2]]
        return logits, h

    def prefix_maps(self, prefix) -> list[np.ndarray]:
        """Per-layer (heads, n_c, n_c) attention maps of the prefix rows alone."""
        rows = prefix.rows if isinstance(prefix, PrefixMatrix) else nd.as_tensor(prefix)
        if rows.ndim == 2:
            rows = nd.reshape(rows, (1,) + rows.shape)
        with nd.no_grad():
            _, maps = self.run_blocks(rows, return_maps=True)
        return [m.data[0] for m in maps]

    def predict_conditions(self, hiddens, positions=None) -> Tensor:
        """Property head on the hidden state at ``positions`` (default: last row).

        hiddens: (n, d) or (B, n, d); positions: per-example row index (B,).
        Returns (5,) or (B, 5) estimates of (vina, qed, sa, logp, lipinski).
        """
        hiddens = nd.as_tensor(hiddens)
        single = hiddens.ndim == 2
        if single:
            hiddens = nd.reshape(hiddens, (1,) + hiddens.shape)
        B, n, d = hiddens.shape
        if positions is None:
            positions = np.full(B, n - 1)
        flat = nd.reshape(hiddens, (B * n, d))
        rows = nd.embed(flat, np.arange(B) * n + np.asarray(positions))
        h = nd.relu(nd.linear(rows, self.head_w1, self.head_b1))
        out = nd.linear(h, self.head_w2, self.head_b2)
        return nd.reshape(out, (len(PROPERTY_NAMES),)) if single else out

    # -- sampling -------------------------------------------------------------

    def sample_ids(self, prefix, n: int | None = None, max_len: int | None = None,
                   temperature: float = 1.0, top_k: int | None = 20, seed: int | None = 0,
                   rng: np.random.Generator | None = None) -> list[list[int]]:
        """Autoregressive sampling by full re-forwarding at every step (no caching).

        ``prefix`` is (n_c, d) for ``n`` samples of one condition, or (B, n_c, d).
        Returns token ids without BOS/EOS. Greedy when temperature == 0.
        """
        rows = prefix.rows if isinstance(prefix, PrefixMatrix) else nd.as_tensor(prefix)
        if rows.ndim == 2:
            count = 1 if n is None else n
            rows = nd.expand(nd.reshape(rows, (1,) + rows.shape), (count,) + rows.shape)
        rows = rows.detach()
        B = rows.shape[0]
        limit = min(max_len or self.config.max_len, self.config.max_len)
        rng = rng if rng is not None else np.random.default_rng(seed)
        ids = np.full((B, 1), self.vocab.bos_id, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        nc, d = self.config.n_c, self.config.d
        with nd.no_grad():
            while ids.shape[1] < limit and not done.all():
                active = np.nonzero(~done)[0]
                sub_rows = Tensor(rows.data[active], dtype=rows.data.dtype)
                l = ids.shape[1]
                tok = nd.embed(self.tok_emb, ids[active])
                pos = nd.expand(nd.getitem(self.pos_emb, slice(0, l)), (len(active), l, d))
                h = self.run_blocks(nd.concat([sub_rows, nd.add(tok, pos)], axis=1))
                last = h.data[:, nc + l - 1, :]
                logits = (last @ self.lm_w.data + self.lm_b.data).astype(np.float64)
                nxt = _choose(logits, temperature, top_k, rng)
                col = np.full(B, self.vocab.pad_id, dtype=np.int64)
                col[active] = nxt
                done[active[nxt == self.vocab.eos_id]] = True
                ids = np.concatenate([ids, col[:, None]], axis=1)
        out = []
        for row in ids[:, 1:]:
            seq = []
            for t in row:
                if t in (self.vocab.eos_id, self.vocab.pad_id):
                    break
                seq.append(int(t))
            out.append(seq)
        return out

    def sample(self, prefix, max_len=None, temperature=1.0, top_k=20, seed=0):
        """One sampled TokenSeq (specials stripped)."""
        from .smiles import decode
        return decode(self.vocab, self.sample_ids(prefix, 1, max_len, temperature, top_k, seed)[0])

    # -- persistence ------------------------------------------------------------

    def save(self, path, extra_tensors: dict | None = None, extra_meta: dict | None = None):
        tensors = {f"param/{k}": v for k, v in self.state_dict().items()}
        for k, v in (extra_tensors or {}).items():
            tensors[k] = v
        meta = {"checkpoint_version": CHECKPOINT_VERSION, "config": asdict(self.config),
                "vocab": self.vocab.to_json()}
        meta.update(extra_meta or {})
        nd.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["PrefixLM", dict, dict]:
        """Returns (model, non-parameter tensors, metadata)."""
        tensors, meta = nd.load_tensors(path)
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')}")
        model = cls(ModelConfig(**meta["config"]), Vocab.from_json(meta["vocab"]))
        params = {k[len("param/"):]: v for k, v in tensors.items() if k.startswith("param/")}
        model.load_state_dict(params)
        rest = {k: v for k, v in tensors.items() if not k.startswith("param/")}
        return model, rest, meta


def _choose(logits: np.ndarray, temperature: float, top_k: int | None, rng) -> np.ndarray:
    if temperature == 0:
        return logits.argmax(axis=-1)
    z = logits / temperature
    if top_k is not None and top_k < z.shape[-1]:
        kth = np.sort(z, axis=-1)[:, -top_k][:, None]
        z = np.where(z >= kth, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random(len(p))
    cdf = np.cumsum(p, axis=-1)
    return np.minimum((cdf < u[:, None]).sum(axis=-1), p.shape[-1] - 1)


def config_json(config: ModelConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)
