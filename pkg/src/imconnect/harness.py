"""Synthetic tasks, perturbations, training, evaluation and the FLOPs model."""
from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as tn
from .encoder import (
    ConfigError,
    EncoderConfig,
    EncoderModel,
    WiringSpec,
    bind,
    build_encoder,
    embed,
    forward,
    forward_from_embeddings,
)
from .tensor import Tape

KEYWORD_PRESENCE = "keyword_presence"
MAJORITY_TOKEN = "majority_token"
ORDER_SENSITIVE_PAIR = "order_sensitive_pair"
TASK_KINDS = (KEYWORD_PRESENCE, MAJORITY_TOKEN, ORDER_SENSITIVE_PAIR)

CLS_TOKEN = 0
KEYWORD_TOKEN = 1
PAIR_A, PAIR_B = 1, 2
FIRST_FILLER = 3  # filler tokens are drawn from [FIRST_FILLER, vocab)

GAUSSIAN = "gaussian_embedding"
SIGN_GRADIENT = "sign_gradient_embedding"
TOKEN_SWAP = "token_swap"
PERTURBATION_KINDS = (GAUSSIAN, SIGN_GRADIENT, TOKEN_SWAP)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


def fingerprint(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- tasks -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticTask:
    """Position 0 always holds a [CLS]-style token. Labels:

    keyword_presence      1 iff the keyword token occurs anywhere
    majority_token        (most frequent non-CLS token, ties to the smaller id) mod num_classes
    order_sensitive_pair  1 iff token A occurs before token B (each occurs once)
    """

    kind: str = KEYWORD_PRESENCE
    vocab_size: int = 200
    seq_len: int = 16
    num_classes: int = 2
    train_size: int = 2000
    eval_size: int = 500
    seed: int = 0

    def validate(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.kind in (KEYWORD_PRESENCE, ORDER_SENSITIVE_PAIR) and self.num_classes != 2:
            raise ConfigError(f"{self.kind} is a binary task")
        if self.vocab_size - FIRST_FILLER < max(2, self.num_classes):
            raise ConfigError(f"vocab_size {self.vocab_size} too small for {self.kind}")
        min_len = 3 if self.kind == ORDER_SENSITIVE_PAIR else 2
        if self.kind == MAJORITY_TOKEN:
            min_len = 3
        if self.seq_len < min_len:
            raise ConfigError(f"seq_len {self.seq_len} too short for {self.kind}")
        if self.train_size < 0 or self.eval_size < 0:
            raise ConfigError("dataset sizes must be non-negative")


@dataclass
class Dataset:
    ids: np.ndarray  # [n, seq] int64
    labels: np.ndarray  # [n] int64

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> Dataset:
        return Dataset(self.ids[idx], self.labels[idx])


def label_of(kind: str, seq, num_classes: int = 2) -> int:
    body = np.asarray(seq)[1:]
    if kind == KEYWORD_PRESENCE:
        return int((body == KEYWORD_TOKEN).any())
    if kind == ORDER_SENSITIVE_PAIR:
        a = np.flatnonzero(body == PAIR_A)
        b = np.flatnonzero(body == PAIR_B)
        return int(a.size > 0 and b.size > 0 and a[0] < b[0])
    if kind == MAJORITY_TOKEN:
        values, counts = np.unique(body, return_counts=True)
        return int(values[np.argmax(counts)] % num_classes)
    raise ConfigError(f"unknown task kind {kind!r}")


def _sample_sequence(task: SyntheticTask, label: int, rng) -> np.ndarray:
    S, V = task.seq_len, task.vocab_size
    seq = np.empty(S, dtype=np.int64)
    seq[0] = CLS_TOKEN
    seq[1:] = rng.integers(FIRST_FILLER, V, size=S - 1)
    if task.kind == KEYWORD_PRESENCE:
        if label:
            k = rng.integers(1, 3)
            seq[1 + rng.choice(S - 1, size=min(k, S - 1), replace=False)] = KEYWORD_TOKEN
    elif task.kind == ORDER_SENSITIVE_PAIR:
        i, j = np.sort(rng.choice(S - 1, size=2, replace=False)) + 1
        seq[i], seq[j] = (PAIR_A, PAIR_B) if label else (PAIR_B, PAIR_A)
    else:
        # plant a token from the target bucket often enough to be the strict mode
        candidates = np.arange(FIRST_FILLER, V)
        tok = rng.choice(candidates[candidates % task.num_classes == label])
        reps = max(2, (S - 1) // 3)
        seq[1 + rng.choice(S - 1, size=min(reps, S - 1), replace=False)] = tok
    return seq


def _make_split(task: SyntheticTask, n: int, rng) -> Dataset:
    k = task.num_classes
    labels = np.tile(np.arange(k), n // k + 1)[:n]
    rng.shuffle(labels)
    ids = np.empty((n, task.seq_len), dtype=np.int64)
    for r, y in enumerate(labels):
        for _ in range(100):
            seq = _sample_sequence(task, int(y), rng)
            if label_of(task.kind, seq, k) == y:
                break
        else:
            raise ConfigError(f"could not sample a class-{y} sequence for {task}")
        ids[r] = seq
    return Dataset(ids, labels.astype(np.int64))


def generate_task(task: SyntheticTask) -> tuple[Dataset, Dataset]:
    task.validate()
    rng = np.random.default_rng(task.seed)
    return _make_split(task, task.train_size, rng), _make_split(task, task.eval_size, rng)


def subsample(data: Dataset, n: int, seed: int) -> Dataset:
    """Uniform sample of ``n`` examples without replacement."""
    if n < 0 or n > len(data):
        raise ValueError(f"cannot subsample {n} examples from a set of {len(data)}")
    idx = np.random.default_rng(seed).permutation(len(data))[:n]
    return data.subset(idx)


# -- perturbations -----------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = SIGN_GRADIENT
    epsilon: float = 0.0
    swap_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ConfigError(f"unknown perturbation kind {self.kind!r}")
        if not self.epsilon >= 0:
            raise ConfigError("epsilon must be non-negative")
        if not 0.0 <= self.swap_fraction <= 1.0:
            raise ConfigError("swap_fraction must lie in [0, 1]")

    @property
    def on_tokens(self) -> bool:
        return self.kind == TOKEN_SWAP

    def label(self) -> str:
        if self.kind == TOKEN_SWAP:
            return f"{self.kind}@{self.swap_fraction:g}"
        return f"{self.kind}@{self.epsilon:g}"


def embedding_gradient(model: EncoderModel, wiring: WiringSpec, ids, labels) -> tuple[np.ndarray, np.ndarray]:
    """(embeddings, d loss / d embeddings) for cross-entropy against ``labels``."""
    emb = embed(model, ids).data
    tape = Tape()
    x = tape.watch(emb)
    loss = tn.cross_entropy(forward_from_embeddings(model, wiring, x), labels)
    return emb, tape.backward(loss)[x]


def perturb(model: EncoderModel, wiring: WiringSpec, ids, labels, spec: PerturbationSpec) -> np.ndarray:
    """Perturbed token ids (token_swap) or perturbed embeddings (other kinds)."""
    ids = np.asarray(ids)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == TOKEN_SWAP:
        out = ids.copy()
        n, S = ids.shape
        m = math.ceil(spec.swap_fraction * S)
        if m == 0:
            return out
        for r in range(n):
            pos = rng.choice(S, size=m, replace=False)
            out[r, pos] = rng.integers(0, model.config.vocab_size, size=m)
        return out
    if spec.kind == GAUSSIAN:
        emb = embed(model, ids).data
        return emb + spec.epsilon * rng.standard_normal(emb.shape)
    emb, grad = embedding_gradient(model, wiring, ids, labels)
    return emb + spec.epsilon * np.sign(grad)


# -- training ----------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    val_fraction: float = 0.2
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


@dataclass
class TrainResult:
    model: EncoderModel
    loss_curve: list[float]  # [initial loss, mean minibatch loss per epoch ...]
    val_curve: list[float]
    best_epoch: int
    steps: int


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr, beta1, beta2, eps):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_loss(model: EncoderModel, wiring: WiringSpec, ids, labels) -> float:
    return tn.cross_entropy(forward(model, wiring, ids), labels).item()


def mean_loss(model, wiring, data: Dataset, batch_size: int) -> float:
    total = 0.0
    for s in range(0, len(data), batch_size):
        b = data.subset(slice(s, s + batch_size))
        total += batch_loss(model, wiring, b.ids, b.labels) * len(b)
    return total / len(data)


def train(model: EncoderModel, wiring: WiringSpec, data: Dataset, hyper: TrainHyper) -> TrainResult:
    """Adam on cross-entropy. A ``val_fraction`` share is held out and the
    parameters with the lowest validation loss are returned."""
    if len(data) == 0:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(hyper.seed)
    model = model.copy()
    order = rng.permutation(len(data))
    n_val = int(round(len(data) * hyper.val_fraction))
    if n_val < 1 or n_val >= len(data):
        train_set, val_set = data, None
    else:
        val_set = data.subset(order[:n_val])
        train_set = data.subset(order[n_val:])

    opt = Adam(model.params, hyper.lr, hyper.beta1, hyper.beta2, hyper.adam_eps)
    curve = [mean_loss(model, wiring, train_set, hyper.batch_size)]
    val_curve = []
    best = (math.inf, 0, None)
    if val_set is not None:
        v = mean_loss(model, wiring, val_set, hyper.batch_size)
        val_curve.append(v)
        best = (v, 0, {k: p.copy() for k, p in model.params.items()})
    step = 0
    for epoch in range(1, hyper.epochs + 1):
        perm = rng.permutation(len(train_set))
        total, seen = 0.0, 0
        for s in range(0, len(train_set), hyper.batch_size):
            if hyper.max_steps is not None and step >= hyper.max_steps:
                break
            b = train_set.subset(perm[s:s + hyper.batch_size])
            tape = Tape()
            P = bind(model, tape)
            loss = tn.cross_entropy(forward(model, wiring, b.ids, P), b.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite training loss at step {step}", step)
            grads = tape.backward(loss)
            opt.step(model.params, {k: grads[t] for k, t in P.items()})
            step += 1
            total += value * len(b)
            seen += len(b)
        if seen == 0:
            break
        curve.append(total / seen)
        if val_set is not None:
            v = mean_loss(model, wiring, val_set, hyper.batch_size)
            val_curve.append(v)
            if v < best[0]:
                best = (v, epoch, {k: p.copy() for k, p in model.params.items()})
    for k, p in model.params.items():
        if not np.isfinite(p).all():
            raise TrainingDivergedError(f"parameter {k} became non-finite", step)
    best_epoch = len(curve) - 1
    if best[2] is not None:
        model.params = best[2]
        best_epoch = best[1]
    return TrainResult(model, curve, val_curve, best_epoch, step)


# -- evaluation --------------------------------------------------------------------------


@dataclass
class Metrics:
    clean_accuracy: float
    perturbed_accuracy: float | None
    flops_forward: float
    wall_time_seconds: float
    fingerprint: str


def predict(model, wiring, ids=None, embeddings=None) -> np.ndarray:
    if embeddings is not None:
        logits = forward_from_embeddings(model, wiring, embeddings)
    else:
        logits = forward(model, wiring, ids)
    return logits.data.argmax(axis=-1)


def accuracy(model, wiring, data: Dataset, spec: PerturbationSpec | None = None, batch_size: int = 64) -> float:
    if len(data) == 0:
        return 0.0
    correct = 0
    for s in range(0, len(data), batch_size):
        b = data.subset(slice(s, s + batch_size))
        if spec is None:
            pred = predict(model, wiring, b.ids)
        else:
            # vary the perturbation seed per batch, reproducibly
            bspec = PerturbationSpec(spec.kind, spec.epsilon, spec.swap_fraction, spec.seed * 1_000_003 + s)
            out = perturb(model, wiring, b.ids, b.labels, bspec)
            pred = predict(model, wiring, ids=out) if spec.on_tokens else predict(model, wiring, embeddings=out)
        correct += int((pred == b.labels).sum())
    return correct / len(data)


def accuracies(model, wiring, data: Dataset, specs: list[PerturbationSpec], batch_size: int = 64) -> list[float]:
    """``accuracy`` for several specs in one pass. The sign-gradient direction
    does not depend on epsilon, so it is computed once per batch."""
    if len(data) == 0:
        return [0.0] * len(specs)
    correct = [0] * len(specs)
    for s in range(0, len(data), batch_size):
        b = data.subset(slice(s, s + batch_size))
        emb = grad = None
        for i, spec in enumerate(specs):
            bspec = PerturbationSpec(spec.kind, spec.epsilon, spec.swap_fraction, spec.seed * 1_000_003 + s)
            if spec.kind == SIGN_GRADIENT:
                if grad is None:
                    emb, grad = embedding_gradient(model, wiring, b.ids, b.labels)
                pred = predict(model, wiring, embeddings=emb + spec.epsilon * np.sign(grad))
            else:
                out = perturb(model, wiring, b.ids, b.labels, bspec)
                pred = predict(model, wiring, ids=out) if spec.on_tokens else predict(model, wiring, embeddings=out)
            correct[i] += int((pred == b.labels).sum())
    return [c / len(data) for c in correct]


def evaluate(model: EncoderModel, wiring: WiringSpec, data: Dataset, spec: PerturbationSpec | None = None,
             batch_size: int = 64) -> Metrics:
    t0 = time.perf_counter()
    clean = accuracy(model, wiring, data, None, batch_size)
    pert = None
    if spec is not None:
        identity = (spec.kind == TOKEN_SWAP and spec.swap_fraction == 0) or (spec.kind != TOKEN_SWAP and spec.epsilon == 0)
        pert = clean if identity else accuracy(model, wiring, data, spec, batch_size)
    fp = fingerprint(asdict(model.config), wiring.to_dict(), asdict(spec) if spec else None, len(data))
    return Metrics(clean, pert, float(count_flops(model.config, wiring)), time.perf_counter() - t0, fp)


# -- FLOPs ------------------------------------------------------------------------------------


def layer_flops(cfg: EncoderConfig, seq_len: int) -> int:
    """Multiply-adds counted as 2 FLOPs, one sequence through one layer."""
    S, D, F, H = seq_len, cfg.d_model, cfg.ffn_dim, cfg.n_heads
    dh = cfg.head_dim
    proj = 4 * (2 * S * D * D + S * D)
    attn = H * (2 * S * S * dh + 5 * S * S + 2 * S * S * dh)  # scores, softmax, context
    ffn = 2 * S * D * F + S * F + 2 * S * F * D + S * D + 8 * S * F  # 8 per GELU
    norms = 2 * (2 * S * D + 7 * S * D)  # residual add + normalise/affine
    return proj + attn + ffn + norms


def forward_flops(cfg: EncoderConfig, seq_len: int | None = None) -> int:
    """Analytic FLOPs of one plain (monotone) forward for one sequence."""
    S = cfg.max_seq_len if seq_len is None else seq_len
    emb = S * cfg.d_model
    head = 2 * cfg.d_model * cfg.num_classes + cfg.num_classes
    return emb + cfg.n_layers * layer_flops(cfg, S) + head


def count_flops(cfg: EncoderConfig, wiring: WiringSpec) -> Fraction:
    """Forward cost relative to the monotone base model, as an exact fraction.

    Each inner iteration of an implicit layer re-evaluates that layer and its
    backward; the model is calibrated so that one inner iteration over every
    layer costs one base forward, giving 1 + (k / L) * T for k implicit layers.
    """
    if wiring.n_layers != cfg.n_layers:
        raise ConfigError(f"wiring has {wiring.n_layers} layers, model has {cfg.n_layers}")
    return 1 + Fraction(wiring.n_implicit, cfg.n_layers) * wiring.euler.iterations


def count_parameters(cfg: EncoderConfig) -> int:
    d, f, L = cfg.d_model, cfg.ffn_dim, cfg.n_layers
    per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * f + f) + (f * d + d)
    return cfg.vocab_size * d + cfg.max_seq_len * d + L * per_layer + d * cfg.num_classes + cfg.num_classes


# -- ablation -------------------------------------------------------------------------------


@dataclass
class CellResult:
    placement: str
    modes: tuple
    gamma: float
    iterations: int
    seed: int
    clean_accuracy: float
    perturbed: dict[str, float]
    flops: Fraction
    params: int
    wall_time: float
    loss_curve: list[float] = field(default_factory=list)


def run_cell(model_cfg: EncoderConfig, wiring: WiringSpec, train_set: Dataset, eval_set: Dataset,
             hyper: TrainHyper, seed: int, perturbations: list[PerturbationSpec]) -> CellResult:
    t0 = time.perf_counter()
    cfg = EncoderConfig(**{**asdict(model_cfg), "seed": seed})
    model = build_encoder(cfg)
    result = train(model, wiring, train_set, TrainHyper(**{**asdict(hyper), "seed": seed}))
    trained = result.model
    clean = accuracy(trained, wiring, eval_set)
    specs = [PerturbationSpec(s.kind, s.epsilon, s.swap_fraction, s.seed + seed) for s in perturbations]
    pert = dict(zip([s.label() for s in perturbations], accuracies(trained, wiring, eval_set, specs)))
    return CellResult(wiring.label(), wiring.modes, wiring.euler.gamma, wiring.euler.iterations, seed, clean, pert,
                      count_flops(cfg, wiring), trained.num_parameters(), time.perf_counter() - t0, result.loss_curve)


@dataclass
class AblationRow:
    placement: str
    cells: list[CellResult]

    def stat(self, key: str | None = None) -> tuple[float, float]:
        vals = np.array([c.clean_accuracy if key is None else c.perturbed[key] for c in self.cells])
        return float(vals.mean()), float(vals.std(ddof=1)) if len(vals) > 1 else 0.0


def run_ablation(placements: list[WiringSpec], task: SyntheticTask, hyper: TrainHyper, n_runs: int,
                 model_cfg: EncoderConfig, perturbations: list[PerturbationSpec], threads: int = 1,
                 train_subset: int | None = None, subset_seed: int = 0) -> list[AblationRow]:
    """Train and evaluate every placement over seeds ``hyper.seed + r``, r < n_runs."""
    if any(p.n_layers != model_cfg.n_layers for p in placements):
        raise ConfigError("every placement must match the encoder's layer count")
    train_set, eval_set = generate_task(task)
    if train_subset is not None:
        train_set = subsample(train_set, train_subset, subset_seed)
    jobs = [(i, hyper.seed + r) for i in range(len(placements)) for r in range(n_runs)]

    def work(job):
        i, seed = job
        return run_cell(model_cfg, placements[i], train_set, eval_set, hyper, seed, perturbations)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    rows = [AblationRow(p.label(), []) for p in placements]
    for (i, _), cell in zip(jobs, results):
        rows[i].cells.append(cell)
    return rows
