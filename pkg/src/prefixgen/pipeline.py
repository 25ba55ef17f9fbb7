"""Corpus labelling, training loop, evaluation and control sweeps."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .condition_encoders import PROPERTY_SCALING, PocketGraph, read_pocket, write_pocket
from .losses import autoregressive_loss, shift_targets, total_loss, triplet_property_loss
from .model import ModelConfig, PrefixLM
from .molprops import (PROPERTY_NAMES, Fingerprint, PropVec, StubVina, fingerprint, max_similarity,
                       mean_pairwise_tanimoto, property_vector)
from .smiles import (SmilesError, TokenSeq, Vocab, build_vocab, decode, detokenize, encode, parse, tokenize,
                     validate)

log = logging.getLogger(__name__)

DATASET_VERSION = 1
N_CONDITION_ROWS = 1 + len(PROPERTY_NAMES)


class EmptyDataset(ValueError):
    pass


class DivergedLoss(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic data

_STARTS = ("C", "CC", "CCC", "O", "N", "F", "Cl", "Br", "CC(C)", "OC", "NC", "CN(C)", "OC(=O)",
           "NC(=O)", "C(F)(F)", "CCCC", "CC(C)(C)", "COC", "CSC")
_CORES = ("c1ccc(cc1)", "c1cc(ccc1)", "C1CCC(CC1)", "c1ccc(nc1)", "c1cnc(cc1)", "C1CCN(CC1)",
          "N1CCN(CC1)", "c1ccc2cc(ccc2c1)", "c1ccc(o1)", "c1ccc(s1)", "C1CC(C1)", "C1CCC(C1)",
          "c1cc(Cl)c(cc1)", "c1cc(F)c(cc1)", "c1cc(O)c(cc1)", "C1COC(C1)", "c1ncc(cn1)")
_LINKERS = ("", "", "C", "CC", "O", "N", "C(=O)", "C(=O)N", "NC(=O)", "S", "OC", "CO", "C=C",
            "CCC", "C(O)", "C(N)")
_ENDS = ("", "C", "O", "N", "F", "Cl", "C(=O)O", "C(F)(F)F", "C#N", "CC", "OC", "N(C)C", "C(=O)N",
         "CCC", "CCCC", "Br", "S")


def synthetic_smiles(rng: np.random.Generator) -> str:
    """One molecule from a small fragment grammar: start (linker core)* linker end."""
    pick = lambda seq: seq[rng.integers(len(seq))]  # noqa: E731
    parts = [pick(_STARTS)]
    for _ in range(int(rng.integers(1, 4))):
        parts += [pick(_LINKERS), pick(_CORES)]
    parts += [pick(_LINKERS), pick(_ENDS)]
    return "".join(parts)


def synthetic_corpus(n: int = 2000, seed: int = 0, max_tokens: int = 80) -> list[str]:
    """``n`` distinct, valid grammar molecules in generation order."""
    rng = np.random.default_rng(seed)
    seen: set[str] = set()
    out: list[str] = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 50 * n:
            raise RuntimeError("fragment grammar cannot produce enough distinct molecules")
        s = synthetic_smiles(rng)
        if s in seen or len(tokenize(s)) > max_tokens:
            continue
        try:
            if not validate(parse(s)).valid:
                continue
        except SmilesError:
            continue
        seen.add(s)
        out.append(s)
    return out


def bundled_corpus() -> list[str]:
    """The packaged 2000-molecule grammar corpus (``synthetic_corpus(2000, seed=0)``)."""
    text = resources.files("prefixgen").joinpath("data/corpus.smi").read_text()
    return [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]


def synthetic_pocket(rng: np.random.Generator, n_atoms: int = 24, spread: float = 4.0,
                     k: int = 8) -> PocketGraph:
    """Gaussian atom cloud around a random centre; the ligand block is a few points near it."""
    centre = rng.normal(0.0, 10.0, size=3)
    coords = centre + rng.normal(0.0, spread, size=(n_atoms, 3))
    elements = [str(e) for e in rng.choice(["C", "C", "C", "N", "O", "S"], size=n_atoms)]
    ligand = centre + rng.normal(0.0, 1.0, size=(4, 3))
    return PocketGraph(elements, coords, ligand, k=k)


def write_synthetic(out_dir, n: int = 2000, n_pockets: int = 8, pocket_fraction: float = 0.5,
                    seed: int = 0) -> Path:
    """Write ``corpus.smi`` (SMILES plus optional pocket file) and ``pockets/*.pkt``.

    Returns the corpus path.
    """
    out = Path(out_dir)
    (out / "pockets").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 7])
    names = []
    for i in range(n_pockets):
        name = f"pockets/pocket_{i:02d}.pkt"
        write_pocket(out / name, synthetic_pocket(rng))
        names.append(name)
    smiles = synthetic_corpus(n, seed)
    path = out / "corpus.smi"
    with open(path, "w") as fh:
        for s in smiles:
            if names and rng.random() < pocket_fraction:
                fh.write(f"{s}\t{names[rng.integers(len(names))]}\n")
            else:
                fh.write(f"{s}\n")
    return path


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class LabeledExample:
    smiles: str
    tokens: TokenSeq
    props: PropVec
    pocket: str | None = None

    def to_json(self) -> str:
        row = {"smiles": self.smiles, **self.props.as_dict(), "pocket": self.pocket}
        return json.dumps(row)


@dataclass
class Dataset:
    examples: list[LabeledExample]
    skipped: int = 0
    pocket_dir: str | None = None
    _pockets: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.examples)

    def pocket(self, ex: LabeledExample) -> PocketGraph | None:
        if ex.pocket is None:
            return None
        if ex.pocket not in self._pockets:
            base = Path(self.pocket_dir) if self.pocket_dir else Path(".")
            self._pockets[ex.pocket] = read_pocket(base / ex.pocket)
        return self._pockets[ex.pocket]

    def vocab(self) -> Vocab:
        return build_vocab(ex.tokens for ex in self.examples)

    def fingerprints(self) -> list[Fingerprint]:
        return [fingerprint(parse(ex.smiles)) for ex in self.examples]

    def subset(self, idx) -> "Dataset":
        return Dataset([self.examples[i] for i in idx], 0, self.pocket_dir, self._pockets)


def _label(smiles: str, vina, max_len: int) -> tuple[TokenSeq, PropVec] | None:
    try:
        tokens = tokenize(smiles)
        g = parse(smiles)
    except SmilesError:
        return None
    if not validate(g).valid or len(tokens) + 2 > max_len:
        return None
    return tokens, property_vector(g, vina)


def ingest(smiles_file, pocket_dir=None, vina=None, max_len: int = 128) -> Dataset:
    """Label every valid SMILES line; invalid or over-long entries are skipped and counted.

    Lines are ``SMILES [pocket_file]``; pocket files are resolved against ``pocket_dir``
    (default: the directory of ``smiles_file``).
    """
    vina = vina if vina is not None else StubVina()
    path = Path(smiles_file)
    examples, skipped = [], 0
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            labelled = _label(parts[0], vina, max_len)
            if labelled is None:
                skipped += 1
                continue
            examples.append(LabeledExample(parts[0], labelled[0], labelled[1],
                                           parts[1] if len(parts) > 1 else None))
    if skipped:
        log.info("skipped %d invalid or over-long SMILES", skipped)
    if not examples:
        raise EmptyDataset(f"{smiles_file}: no valid molecules")
    pdir = str(pocket_dir) if pocket_dir is not None else str(path.parent)
    return Dataset(examples, skipped, pdir)


def write_dataset(ds: Dataset, path):
    with open(path, "w") as fh:
        for ex in ds.examples:
            fh.write(ex.to_json() + "\n")


def read_dataset(path, pocket_dir=None, trust_labels: bool = False, vina=None,
                 max_len: int = 128) -> Dataset:
    """Load a JSONL dataset. Labels are recomputed unless ``trust_labels``."""
    vina = vina if vina is not None else StubVina()
    examples, skipped = [], 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                row = json.loads(raw)
                smiles = row["smiles"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise ValueError(f"{path}:{lineno}: malformed dataset row") from None
            labelled = _label(smiles, vina, max_len)
            if labelled is None:
                skipped += 1
                continue
            props = PropVec.from_dict(row) if trust_labels else labelled[1]
            examples.append(LabeledExample(smiles, labelled[0], props, row.get("pocket")))
    if not examples:
        raise EmptyDataset(f"{path}: no valid molecules")
    pdir = str(pocket_dir) if pocket_dir is not None else str(Path(path).parent)
    return Dataset(examples, skipped, pdir)


def split_indices(n: int, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, held-out) index split; at least one example on each side when n >= 2."""
    perm = np.random.default_rng([seed, 1]).permutation(n)
    k = int(round(n * holdout))
    if n >= 2:
        k = min(max(k, 1), n - 1)
    else:
        k = 0
    return np.sort(perm[k:]), np.sort(perm[:k])


# ---------------------------------------------------------------------------
# configuration


LR_SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    # model
    d: int = 128
    n_heads: int = 4
    n_layers: int = 4
    max_len: int = 128
    pocket_d_f: int = 64
    pocket_d_e: int = 32
    pocket_c_v: int = 8
    pocket_layers: int = 3
    # optimisation
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    dropout: float = 0.1
    lr_schedule: str = "cosine"
    warmup: int = 100
    lr_floor: float = 0.1
    batch_size: int = 16
    steps: int = 2000
    w_pred: float = 0.1
    p_drop: float = 0.1
    seed: int = 0
    # schedule
    checkpoint_every: int = 500
    pred_every: int = 20
    pred_max_len: int = 64
    holdout: float = 0.1
    eval_every: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError("p_drop must lie in [0, 1)")
        if not 0.0 <= self.holdout < 1.0:
            raise ConfigError("holdout must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.warmup < 0 or not 0.0 <= self.lr_floor <= 1.0:
            raise ConfigError("warmup must be >= 0 and lr_floor in [0, 1]")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``: linear warmup, then constant or cosine decay
        from ``lr`` down to ``lr_floor * lr`` at the final step."""
        scale = min(1.0, step / self.warmup) if self.warmup else 1.0
        if self.lr_schedule == "cosine" and self.steps > self.warmup:
            frac = min(max((step - self.warmup) / (self.steps - self.warmup), 0.0), 1.0)
            scale *= self.lr_floor + (1.0 - self.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac))
        return self.lr * scale

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d=self.d, n_heads=self.n_heads,
                           n_layers=self.n_layers, max_len=self.max_len, seed=self.seed,
                           pocket_d_f=self.pocket_d_f, pocket_d_e=self.pocket_d_e,
                           pocket_c_v=self.pocket_c_v, pocket_layers=self.pocket_layers)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def _coerce(name: str, typ, text: str):
    try:
        if typ in ("int", int):
            return int(text)
        if typ in ("float", float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None
    return text


def config_field_types() -> dict[str, str]:
    return {f.name: f.type if isinstance(f.type, str) else f.type.__name__
            for f in dataclasses.fields(TrainConfig)}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines with '#' comments."""
    types = config_field_types()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, types[key], value)
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    values = {}
    if path is not None:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(cfg).items())


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adaptive-moment optimiser with global-norm gradient clipping."""

    def __init__(self, params: dict[str, nd.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 1.0):
        self.params = params
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        norm = nd.global_norm(grads.values())
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / (norm + 1e-6)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * np.float32(factor)
            self.m[k] = (b1 * self.m[k] + (1 - b1) * g).astype(p.data.dtype)
            self.v[k] = (b2 * self.v[k] + (1 - b2) * g * g).astype(p.data.dtype)
            if self.lr:
                step = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
                p.data = (p.data - step).astype(p.data.dtype)
        return norm

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int):
        for k in self.params:
            self.m[k] = tensors[f"adam_m/{k}"].copy()
            self.v[k] = tensors[f"adam_v/{k}"].copy()
        self.t = int(t)


# ---------------------------------------------------------------------------
# batching and losses


def batch_ids(vocab: Vocab, seqs: list[TokenSeq]) -> np.ndarray:
    """BOS + tokens + EOS, right-padded to the longest sequence."""
    enc = [encode(vocab, s, add_specials=True) for s in seqs]
    width = max(len(e) for e in enc)
    out = np.full((len(enc), width), vocab.pad_id, dtype=np.int64)
    for i, e in enumerate(enc):
        out[i, :len(e)] = e
    return out


def normalised(name: str, value: float) -> float:
    shift, scale = PROPERTY_SCALING[name]
    return (value - shift) / scale


def heldout_loss(model: PrefixLM, ds: Dataset, batch_size: int = 64) -> float:
    """Per-token teacher-forced cross-entropy with all available conditions, no dropout."""
    total, count = 0.0, 0
    pad = model.vocab.pad_id
    with nd.no_grad():
        for start in range(0, len(ds), batch_size):
            exs = ds.examples[start:start + batch_size]
            ids = batch_ids(model.vocab, [e.tokens for e in exs])
            prefix = model.conditions([e.props for e in exs], [ds.pocket(e) for e in exs])
            logits, _ = model.forward_batch(prefix, ids)
            tgt = shift_targets(ids, pad)
            n = int((tgt != pad).sum())
            total += autoregressive_loss(logits, tgt, pad).item() * n
            count += n
    return total / max(count, 1)


def achieved_properties(smiles_list: list[str], vina=None) -> list[PropVec | None]:
    """Molprops of each sample, or None where the string is not a valid molecule."""
    vina = vina if vina is not None else StubVina()
    out = []
    for s in smiles_list:
        try:
            g = parse(s)
            out.append(property_vector(g, vina) if validate(g).valid and g.n_atoms else None)
        except SmilesError:
            out.append(None)
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: PrefixLM
    log: list[dict]
    initial_heldout: float
    final_heldout: float
    checkpoint: Path | None


LOG_FIELDS = ("step", "at_loss", "pred_loss", "total", "grad_norm", "heldout")


def _save_checkpoint(path, model: PrefixLM, opt: Adam, cfg: TrainConfig, step: int,
                     rng: np.random.Generator, initial_heldout: float):
    meta = {"train_config": dataclasses.asdict(cfg), "step": step, "adam_t": opt.t,
            "rng_state": rng.bit_generator.state, "initial_heldout": initial_heldout}
    model.save(path, opt.state_tensors(), meta)


def train(cfg: TrainConfig, ds: Dataset, out_dir=None, resume=None, vina=None) -> TrainResult:
    """Seeded minibatch training; checkpoints carry optimiser and RNG state for exact resume."""
    if not len(ds):
        raise EmptyDataset("training needs at least one example")
    vina = vina if vina is not None else StubVina()
    train_idx, held_idx = split_indices(len(ds), cfg.holdout, cfg.seed)
    train_ds = ds.subset(train_idx)
    held_ds = ds.subset(held_idx) if len(held_idx) else train_ds
    if resume is not None:
        model, rest, meta = PrefixLM.load(resume)
        start = int(meta["step"])
        initial = float(meta["initial_heldout"])
        params = dict(model.named_parameters())
        opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.grad_clip)
        opt.load_state_tensors(rest, meta["adam_t"])
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng_state"]
    else:
        vocab = ds.vocab()
        model = PrefixLM(cfg.model_config(len(vocab)), vocab)
        start = 0
        params = dict(model.named_parameters())
        opt = Adam(params, cfg.lr, (cfg.beta1, cfg.beta2), cfg.eps, cfg.grad_clip)
        rng = np.random.default_rng(cfg.seed)
        initial = heldout_loss(model, held_ds)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    vocab, pad = model.vocab, model.vocab.pad_id
    nc = model.config.n_c
    ckpt = None
    for step in range(start + 1, cfg.steps + 1):
        idx = rng.integers(len(train_ds), size=min(cfg.batch_size, len(train_ds)))
        exs = [train_ds.examples[i] for i in idx]
        ids = batch_ids(vocab, [e.tokens for e in exs])
        drop = rng.random((len(exs), N_CONDITION_ROWS)) < cfg.p_drop
        pockets = [train_ds.pocket(e) for e in exs]
        anchors = [None if g is None else g.choose_anchor(rng) for g in pockets]
        conds = [e.props for e in exs]
        model.zero_grad()
        opt.lr = cfg.lr_at(step)
        prefix = model.conditions(conds, pockets, anchors, rng, drop)
        logits, hid = model.forward_batch(prefix, ids, dropout=cfg.dropout, rng=rng)
        at = autoregressive_loss(logits, shift_targets(ids, pad), pad)
        if cfg.w_pred and cfg.pred_every and step % cfg.pred_every == 0:
            pred = _prediction_loss(model, prefix, hid, ids, conds, drop, cfg, rng, vina, nc)
        else:
            pred = nd.Tensor(0.0)
        loss, parts = total_loss(at, pred, cfg.w_pred)
        if not math.isfinite(parts.total):
            raise DivergedLoss(f"step {step}: non-finite loss (at={parts.at_loss}, "
                               f"pred={parts.pred_loss}); lower lr or grad_clip")
        nd.backward(loss)
        gnorm = opt.step()
        row = {"step": step, "at_loss": parts.at_loss, "pred_loss": parts.pred_loss,
               "total": parts.total, "grad_norm": gnorm, "heldout": ""}
        if cfg.eval_every and step % cfg.eval_every == 0:
            row["heldout"] = heldout_loss(model, held_ds)
        rows.append(row)
        if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            ckpt = out / f"ckpt_{step:06d}.ndgt"
            _save_checkpoint(ckpt, model, opt, cfg, step, rng, initial)
    final = heldout_loss(model, held_ds)
    if out is not None:
        ckpt = out / "final.ndgt"
        _save_checkpoint(ckpt, model, opt, cfg, max(cfg.steps, start), rng, initial)
        _append_log(out / "train_log.csv", rows, fresh=resume is None)
    return TrainResult(model, rows, initial, final, ckpt)


def _prediction_loss(model, prefix, hid, ids, conds, drop, cfg, rng, vina, nc):
    """Triplet loss: head estimate vs requested conditions vs a fresh sample's properties."""
    pad = model.vocab.pad_id
    sampled = model.sample_ids(prefix.detach(), max_len=cfg.pred_max_len, rng=rng)
    achieved = achieved_properties([detokenize(decode(model.vocab, s)) for s in sampled], vina)
    B = len(conds)
    c = np.zeros((B, len(PROPERTY_NAMES)))
    c_dot = np.zeros_like(c)
    mask = np.zeros_like(c, dtype=bool)
    for b in range(B):
        if achieved[b] is None:
            continue
        for k, name in enumerate(PROPERTY_NAMES):
            want, got = getattr(conds[b], name), getattr(achieved[b], name)
            if want is None or got is None or drop[b, k + 1]:
                continue
            c[b, k], c_dot[b, k], mask[b, k] = normalised(name, want), normalised(name, got), True
    positions = nc + (ids != pad).sum(axis=1) - 1
    c_hat = model.predict_conditions(hid, positions)
    return triplet_property_loss(c_hat, c, c_dot, mask)


def _append_log(path: Path, rows: list[dict], fresh: bool):
    mode = "w" if fresh or not path.exists() else "a"
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if mode == "w":
            w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class EvalReport:
    n_samples: int
    validity: float
    diversity: float
    sim_train: float
    prop_mean: dict
    prop_std: dict
    mae: dict

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


CONDITION_MODES = ("ground_truth", "shifted", "unconditional")


def condition_settings(conds: list[PropVec], n: int, mode: str, prop: str | None = None,
                       scale: float = 0.0) -> list[PropVec | None]:
    """``n`` condition vectors cycled from ``conds``; None means the all-null prefix."""
    if mode not in CONDITION_MODES:
        raise ValueError(f"unknown conditions mode {mode!r}")
    if mode == "unconditional":
        return [None] * n
    if not conds:
        raise EmptyDataset("conditioned evaluation needs reference conditions")
    base = [conds[i % len(conds)] for i in range(n)]
    if mode == "shifted":
        if prop not in PROPERTY_NAMES:
            raise ValueError(f"unknown property {prop!r}")
        base = [c.shifted(prop, scale) for c in base]
    return base


def reference_pockets(reference: Dataset, n: int, mode: str) -> list[PocketGraph | None]:
    """Pockets cycled like the reference conditions; none in unconditional mode."""
    if mode == "unconditional" or not len(reference):
        return [None] * n
    return [reference.pocket(reference.examples[i % len(reference)]) for i in range(n)]


def sample_smiles(model: PrefixLM, settings: list[PropVec | None], pockets=None, seed: int = 0,
                  temperature: float = 1.0, top_k: int | None = 20, max_len: int | None = None,
                  chunk: int = 100) -> list[str]:
    """Sample one molecule per condition setting; the stream depends only on ``seed``."""
    rng = np.random.default_rng(seed)
    n = len(settings)
    pockets = pockets if pockets is not None else [None] * n
    out = []
    for start in range(0, n, chunk):
        part = settings[start:start + chunk]
        B = len(part)
        conds = [c if c is not None else PropVec() for c in part]
        drop = np.zeros((B, N_CONDITION_ROWS), dtype=bool)
        for b, c in enumerate(part):
            if c is None:
                drop[b, :] = True
        with nd.no_grad():
            prefix = model.conditions(conds, pockets[start:start + chunk], None, None, drop)
        ids = model.sample_ids(prefix, max_len=max_len, temperature=temperature, top_k=top_k, rng=rng)
        out.extend(detokenize(decode(model.vocab, s)) for s in ids)
    return out


def report(samples: list[str], settings: list[PropVec | None], train_fps: list[Fingerprint],
           vina=None) -> EvalReport:
    achieved = achieved_properties(samples, vina)
    valid = [(s, a, c) for s, a, c in zip(samples, achieved, settings) if a is not None]
    n = len(samples)
    fps = [fingerprint(parse(s)) for s, _, _ in valid]
    diversity = 1.0 - mean_pairwise_tanimoto(fps) if len(fps) >= 2 else 0.0
    sim = float(np.mean([max_similarity(f, train_fps) for f in fps])) if fps and train_fps else 0.0
    mean, std, mae = {}, {}, {}
    for name in PROPERTY_NAMES:
        vals = [getattr(a, name) for _, a, _ in valid if getattr(a, name) is not None]
        mean[name] = float(np.mean(vals)) if vals else None
        std[name] = float(np.std(vals)) if vals else None
        errs = [abs(getattr(a, name) - getattr(c, name)) for _, a, c in valid
                if c is not None and getattr(c, name) is not None and getattr(a, name) is not None]
        mae[name] = float(np.mean(errs)) if errs else None
    return EvalReport(n, len(valid) / n if n else 0.0, min(max(diversity, 0.0), 1.0),
                      min(max(sim, 0.0), 1.0), mean, std, mae)


def evaluate(model: PrefixLM, reference: Dataset, n_samples: int = 100, mode: str = "ground_truth",
             prop: str | None = None, scale: float = 0.0, train_fps=None, seed: int = 0,
             temperature: float = 1.0, top_k: int | None = 20, vina=None) -> EvalReport:
    """Sample ``n_samples`` molecules under conditions drawn from ``reference`` and score them."""
    settings = condition_settings([e.props for e in reference.examples], n_samples, mode, prop, scale)
    pockets = reference_pockets(reference, n_samples, mode)
    samples = sample_smiles(model, settings, pockets, seed=seed, temperature=temperature, top_k=top_k)
    fps = train_fps if train_fps is not None else reference.fingerprints()
    return report(samples, settings, fps, vina)


@dataclass(frozen=True)
class SweepRow:
    scale: float
    mean: float | None
    std: float | None
    validity: float


def control_sweep(model: PrefixLM, reference: Dataset, prop: str, scales, n_samples: int = 200,
                  seed: int = 0, temperature: float = 1.0, top_k: int | None = 20,
                  vina=None) -> list[SweepRow]:
    """Shift ``prop`` by each scale, sample, and report the achieved property statistics.

    Every scale reuses the same sampling seed, so scale 0 reproduces the
    ground-truth evaluation and rows differ only through the condition.
    """
    if prop not in PROPERTY_NAMES:
        raise ValueError(f"unknown property {prop!r}")
    conds = [e.props for e in reference.examples]
    rows = []
    for s in scales:
        settings = condition_settings(conds, n_samples, "shifted", prop, float(s))
        pockets = reference_pockets(reference, n_samples, "shifted")
        samples = sample_smiles(model, settings, pockets, seed=seed, temperature=temperature, top_k=top_k)
        r = report(samples, settings, [], vina)
        rows.append(SweepRow(float(s), r.prop_mean[prop], r.prop_std[prop], r.validity))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    lines = ["scale,mean,std,validity"]
    for r in rows:
        lines.append(",".join(repr(v) if v is not None else "" for v in
                              (r.scale, r.mean, r.std, r.validity)))
    return "\n".join(lines) + "\n"
