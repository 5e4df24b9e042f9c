"""Training loop, evaluation and configuration."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import numkit as nk
from .checkpoint import Checkpoint, save_checkpoint
from .ehr import (DataError, Dataset, DiseaseVocabulary, SynthConfig, generate_synthetic, load_dataset,
                  parse_patient_line, random_rules, split_dataset)
from .events import make_encoder
from .metrics import precision_at_k
from .model import DHCE, HyperParams, PatientInputs, prepare_patient

log = logging.getLogger(__name__)

EVAL_KS = (5, 10, 20)


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # data: a JSONL file, or synthetic generation when empty
    data: str = ""
    vocab: str = ""
    synth_n_patients: int = 500
    synth_vocab_size: int = 80
    synth_min_visits: int = 3
    synth_max_visits: int = 8
    synth_min_codes: int = 2
    synth_max_codes: int = 5
    synth_chronic_persistence: float = 0.5
    synth_rules: str = "random:40:0.9"
    synth_event_noise: float = 0.1
    synth_seed: int = 0
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    split_seed: int = 0
    # model and optimizer
    d: int = 64
    output_activation: str = "softmax"
    eps_clip: float = 1e-12
    chronic_window: int = 1
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 16
    max_steps: int = 0
    patience: int = 10
    seed: int = 0
    # event encoder
    encoder: str = "hashing"
    encoder_dim: int = 64
    encoder_seed: int = 0
    encoder_endpoint: str = ""
    encoder_timeout: float = 10.0
    encoder_retries: int = 2
    # outputs
    checkpoint: str = ""
    report_dir: str = ""

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.max_steps < 0 or self.patience < 0:
            raise ValueError("max_steps and patience must be >= 0")

    def hyperparams(self) -> HyperParams:
        return HyperParams(self.d, self.output_activation, self.eps_clip, self.chronic_window)

    def encoder_spec(self) -> dict:
        if self.encoder == "hashing":
            return {"kind": "hashing", "dim": self.encoder_dim, "seed": self.encoder_seed}
        if self.encoder == "remote":
            return {"kind": "remote", "endpoint": self.encoder_endpoint, "timeout": self.encoder_timeout,
                    "retries": self.encoder_retries}
        raise ValueError(f"unknown encoder {self.encoder!r}")

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            n_patients=self.synth_n_patients,
            vocab_size=self.synth_vocab_size,
            visits_per_patient=(self.synth_min_visits, self.synth_max_visits),
            codes_per_visit=(self.synth_min_codes, self.synth_max_codes),
            chronic_persistence=self.synth_chronic_persistence,
            rules=parse_rules(self.synth_rules, self.synth_vocab_size, self.synth_seed),
            event_noise=self.synth_event_noise,
            seed=self.synth_seed,
        )

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(coerce_values(overrides))
        return TrainConfig(**values)


def parse_rules(text: str, vocab_size: int, seed: int = 0) -> tuple[tuple[int, int, float], ...]:
    """``random:N:p`` or ``a>b:p;c>d:p`` (code indices)."""
    text = text.strip()
    if not text:
        return ()
    if text.startswith("random:"):
        _, n, p = text.split(":")
        return random_rules(vocab_size, int(n), float(p), seed)
    rules = []
    for part in text.split(";"):
        pair, p = part.split(":")
        a, b = pair.split(">")
        rules.append((int(a), int(b), float(p)))
    return tuple(rules)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def coerce_values(raw: dict) -> dict:
    out = {}
    for key, value in raw.items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        kind = _FIELD_TYPES[key]
        if not isinstance(value, str):
            out[key] = value
        elif kind == "int":
            out[key] = int(value)
        elif kind == "float":
            out[key] = float(value)
        else:
            out[key] = value
    return out


def read_config(path) -> TrainConfig:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    raw = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return TrainConfig().with_overrides(raw)


def write_config(config: TrainConfig, path) -> None:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(config)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- data preparation -------------------------------------------------------


def load_or_generate(config: TrainConfig) -> Dataset:
    if config.data:
        return load_dataset(config.data, config.vocab or None)
    return generate_synthetic(config.synth_config())


def check_vocabulary(dataset: Dataset, vocab: DiseaseVocabulary) -> None:
    unknown = sorted({c for p in dataset.patients for v in p.visits for c in v.codes if c not in vocab})
    if unknown:
        raise DataError(f"codes not in the model vocabulary: {unknown}")


def prepare_all(dataset: Dataset, vocab: DiseaseVocabulary, encoder, chronic_window: int = 1) -> list[PatientInputs]:
    check_vocabulary(dataset, vocab)
    return [prepare_patient(p, vocab, encoder, chronic_window) for p in dataset.patients]


# --- evaluation -------------------------------------------------------------


@dataclass
class EvalReport:
    precision: dict[int, float]
    mean_loss: float
    n_patients: int
    n_predictions: int

    def rows(self) -> list[tuple[str, str]]:
        out = [(f"precision@{k}", f"{v:.6f}") for k, v in sorted(self.precision.items())]
        out += [("mean_loss", f"{self.mean_loss:.6f}"), ("patients", str(self.n_patients)),
                ("predictions", str(self.n_predictions))]
        return out


def score_prefixes(scorer: Callable[[PatientInputs], Sequence[np.ndarray]], inputs: Sequence[PatientInputs],
                   ks: Iterable[int] = EVAL_KS, losses: Sequence[float] | None = None) -> EvalReport:
    """Precision@k over every next-visit prediction produced by ``scorer``.

    ``scorer(p)`` returns one score vector per prefix ``1..T-1`` of patient
    ``p``; prefix ``t`` is scored against visit ``t + 1``.
    """
    if not inputs:
        raise DataError("cannot evaluate an empty dataset")
    ks = tuple(ks)
    sums = dict.fromkeys(ks, 0.0)
    n = 0
    for p in inputs:
        for scores, truth in zip(scorer(p), p.targets[1:]):
            for k in ks:
                sums[k] += precision_at_k(scores, truth, k)
            n += 1
    mean_loss = float(np.mean(losses)) if losses else float("nan")
    return EvalReport({k: s / n for k, s in sums.items()}, mean_loss, len(inputs), n)


def evaluate_inputs(model: DHCE, inputs: Sequence[PatientInputs], ks: Iterable[int] = EVAL_KS) -> EvalReport:
    losses: list[float] = []

    def scorer(p: PatientInputs):
        trace = model.forward_patient(p)
        losses.append(trace.loss.item())
        return [pt.y_hat.data[0] for pt in trace.prefixes]

    return score_prefixes(scorer, inputs, ks, losses)


def evaluate(checkpoint: Checkpoint, dataset: Dataset, ks: Iterable[int] = EVAL_KS, encoder=None) -> EvalReport:
    """Score every next-visit prediction of ``dataset`` with a trained model."""
    if not dataset.patients:
        raise DataError("cannot evaluate an empty dataset")
    encoder = encoder or make_encoder(checkpoint.encoder)
    model = checkpoint.model()
    inputs = prepare_all(dataset, checkpoint.vocabulary, encoder, model.hp.chronic_window)
    return evaluate_inputs(model, inputs, ks)


def frequency_scores(inputs: Sequence[PatientInputs]) -> np.ndarray:
    """Code frequency over every visit of ``inputs``."""
    total = sum(t.astype(np.float64) for p in inputs for t in p.targets)
    return total / total.sum()


def evaluate_frequency_baseline(train: Sequence[PatientInputs], test: Sequence[PatientInputs],
                                ks: Iterable[int] = EVAL_KS) -> EvalReport:
    scores = frequency_scores(train)
    return score_prefixes(lambda p: [scores] * (p.n_visits - 1), test, ks)


# --- training ---------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    steps: int
    train_loss: float
    val_p10: float
    seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog] = field(default_factory=list)
    splits: tuple[Dataset, Dataset, Dataset] | None = None
    best_epoch: int = 0


def _raise_nonfinite(model: DHCE, batch: Sequence[PatientInputs]) -> None:
    for p in batch:
        value = model.loss(p).item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} for patient {p.patient_id!r}")
    raise NumericError("non-finite batch loss")


def train(config: TrainConfig, dataset: Dataset | None = None) -> TrainResult:
    """Patient-batched Adam on the sequence loss; keeps the best-validation parameters."""
    config.validate()
    dataset = dataset if dataset is not None else load_or_generate(config)
    splits = split_dataset(dataset, (config.split_train, config.split_val, config.split_test), config.split_seed)
    train_set, val_set, _ = splits
    if not train_set.patients:
        raise DataError("training split is empty")
    encoder = make_encoder(config.encoder_spec())
    hp = config.hyperparams()
    vocab = dataset.vocabulary
    train_inputs = prepare_all(train_set, vocab, encoder, hp.chronic_window)
    val_inputs = prepare_all(val_set, vocab, encoder, hp.chronic_window)
    model = DHCE.create(len(vocab), encoder.dim, hp, seed=config.seed)
    state = nk.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    rng = np.random.default_rng(config.seed)
    params = list(model.params.values())

    history: list[EpochLog] = []
    best = (-1.0, 0, model.params.copy())
    stale = 0
    steps = 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_inputs))
        total = 0.0
        seen = 0
        for start in range(0, len(order), config.batch_size):
            if config.max_steps and steps >= config.max_steps:
                break
            batch = [train_inputs[i] for i in order[start : start + config.batch_size]]
            with nk.Tape() as tape:
                loss = model.batch_loss(batch)
            value = loss.item()
            if not math.isfinite(value):
                _raise_nonfinite(model, batch)
            grads = nk.backward(tape, loss, wrt=params)
            nk.adam_step(model.params, {p.name: grads[p] for p in params}, state)
            steps += 1
            total += value * len(batch)
            seen += len(batch)
        if seen == 0:
            break
        val_p10 = evaluate_inputs(model, val_inputs, (10,)).precision[10] if val_inputs else float("nan")
        entry = EpochLog(epoch, steps, total / seen, val_p10, time.perf_counter() - t0)
        history.append(entry)
        log.info("epoch %d steps %d train_loss %.6f val_p@10 %.4f", epoch, steps, entry.train_loss, val_p10)
        if not val_inputs:
            best = (float("nan"), epoch, model.params)
        elif val_p10 > best[0]:
            best = (val_p10, epoch, model.params.copy())
            stale = 0
        else:
            stale += 1
            if config.patience and stale >= config.patience:
                log.info("early stop after %d stale epochs", stale)
                break
    _, best_epoch, best_params = best
    ckpt = Checkpoint(hp, vocab, dataset.event_types, encoder.describe(), best_params.copy(),
                      meta={"best_epoch": best_epoch, "steps": steps})
    if config.checkpoint:
        save_checkpoint(ckpt, config.checkpoint)
    return TrainResult(ckpt, history, splits, best_epoch)


# --- inference and gradient checking ----------------------------------------


def predict_next(checkpoint: Checkpoint, patient_line: str, encoder=None) -> list[tuple[str, float]]:
    """Rank every code for the visit after the patient's full history."""
    record, codes, _ = parse_patient_line(patient_line)
    if not record.visits:
        raise DataError("patient has no visits")
    unknown = sorted({c for c in codes if c not in checkpoint.vocabulary})
    if unknown:
        raise DataError(f"unknown code(s): {unknown}")
    encoder = encoder or make_encoder(checkpoint.encoder)
    model = checkpoint.model()
    inputs = prepare_patient(record, checkpoint.vocabulary, encoder, model.hp.chronic_window)
    scores = model.predict_next(inputs)
    order = np.argsort(-scores, kind="stable")
    return [(checkpoint.vocabulary.codes[i], float(scores[i])) for i in order]


GRADCHECK_TOL = 1e-4


def gradcheck_fixture(seed: int = 0, n_patients: int = 3, vocab_size: int = 20, d: int = 16, event_dim: int = 16,
                      scale: float = 1.0, output_activation: str = "softmax"):
    """A small seeded batch and a model whose parameters are drawn from U(-scale, scale).

    The default initialization is too small for a finite-difference check:
    deep gradients fall to ~1e-10, below central-difference roundoff.
    """
    cfg = SynthConfig(n_patients=n_patients, vocab_size=vocab_size, visits_per_patient=(2, 4),
                      codes_per_visit=(2, 4), rules=random_rules(vocab_size, max(1, vocab_size // 4), 0.9, seed),
                      seed=seed)
    data = generate_synthetic(cfg)
    encoder = make_encoder({"kind": "hashing", "dim": event_dim, "seed": seed})
    model = DHCE.create(vocab_size, event_dim, HyperParams(d=d, output_activation=output_activation), seed=seed)
    rng = np.random.default_rng([seed, 1])
    for t in model.params.values():
        t.data = rng.uniform(-scale, scale, t.shape)
    batch = prepare_all(data, data.vocabulary, encoder)
    return model, batch


def gradcheck_suite(seed: int = 0, eps: float = 1e-5, **fixture) -> dict[str, float]:
    """Max relative gradient error per named parameter on the seeded fixture."""
    model, batch = gradcheck_fixture(seed, **fixture)
    names = list(model.params.keys())
    errors = nk.gradient_errors(lambda: model.batch_loss_terms(batch), [model.params[n] for n in names], eps)
    return dict(zip(names, errors))
