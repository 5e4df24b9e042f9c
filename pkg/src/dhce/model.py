"""The DHCE network: parameters, per-visit forward pass and prefix predictions."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numkit as nk
from .ehr import DiseaseVocabulary, PatientRecord, Visit
from .events import EventRepresentation, TextEncoder, aggregate_events, encode_visit_events
from .hypergraph import DynamicHypergraph, HypergraphEntry, build_dynamic_hypergraph, multi_hot
from .layers import bce_terms, fuse_predict, gru_step, hyper_context, sequence_loss, transfer_attention, visit_attention
from .numkit import Tensor

INIT_SCALE = 0.08


@dataclass(frozen=True)
class HyperParams:
    d: int = 64
    output_activation: str = "softmax"
    eps_clip: float = 1e-12
    chronic_window: int = 1

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0 < self.eps_clip < 1e-3:
            raise ValueError("eps_clip must lie in (0, 1e-3)")
        if self.output_activation not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.chronic_window < 1:
            raise ValueError("chronic_window must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_shapes(n_codes: int, d: int, event_dim: int) -> list[tuple[str, tuple[int, int]]]:
    """The parameter manifest, in its fixed order."""
    return [
        ("embeddings", (n_codes, d)),
        ("chronic_ctx", (d, d)),
        ("acute_ctx", (d, d)),
        ("attn_query", (d, d)),
        ("attn_key", (d, d)),
        ("attn_value", (d, d)),
        ("gru_update_w", (2 * d, d)),
        ("gru_update_b", (1, d)),
        ("gru_reset_w", (2 * d, d)),
        ("gru_reset_b", (1, d)),
        ("gru_cand_w", (2 * d, d)),
        ("gru_cand_b", (1, d)),
        ("visit_attn_proj", (d, d)),
        ("visit_attn_ctx", (d, 1)),
        ("event_attn_proj", (event_dim, event_dim)),
        ("event_attn_ctx", (event_dim, 1)),
        ("event_out", (event_dim, d)),
        ("event_default", (1, d)),
        ("gate_event", (d, d)),
        ("gate_visit", (d, d)),
        ("gate_bias", (1, d)),
        ("out_w", (d, n_codes)),
        ("out_b", (1, n_codes)),
    ]


_BIASES = {"gru_update_b", "gru_reset_b", "gru_cand_b", "gate_bias", "out_b"}


class ModelParameters:
    """Named parameter tensors in manifest order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    @classmethod
    def initialize(cls, n_codes: int, d: int, event_dim: int, seed: int = 0) -> "ModelParameters":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in parameter_shapes(n_codes, d, event_dim):
            data = np.zeros(shape) if name in _BIASES else rng.uniform(-INIT_SCALE, INIT_SCALE, shape)
            tensors[name] = Tensor(data, name=name)
        return cls(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def keys(self):
        return self.tensors.keys()

    def manifest(self) -> list[tuple[str, tuple[int, int]]]:
        return [(n, t.shape) for n, t in self.tensors.items()]

    def copy(self) -> "ModelParameters":
        return ModelParameters({n: Tensor(t.data.copy(), name=n) for n, t in self.tensors.items()})


@dataclass
class PatientInputs:
    """Everything the network needs for one patient, precomputed once."""

    patient_id: str
    dyn: DynamicHypergraph
    events: list[EventRepresentation]
    targets: list[np.ndarray]

    @property
    def n_visits(self) -> int:
        return len(self.dyn)


def prepare_patient(patient: PatientRecord | Sequence[Visit], vocab: DiseaseVocabulary, encoder: TextEncoder,
                    chronic_window: int = 1, patient_id: str | None = None) -> PatientInputs:
    visits = patient.visits if isinstance(patient, PatientRecord) else tuple(patient)
    if not visits:
        raise ValueError("patient has no visits")
    pid = patient.patient_id if isinstance(patient, PatientRecord) else (patient_id or "")
    codes = [vocab.encode(v.codes) for v in visits]
    dyn = build_dynamic_hypergraph(codes, len(vocab), chronic_window)
    events = [encode_visit_events(v.events, encoder) for v in visits]
    targets = [multi_hot(c, len(vocab)) for c in codes]
    return PatientInputs(pid, dyn, events, targets)


@dataclass
class VisitTrace:
    node_reps: Tensor  # embeddings plus chronic and acute contexts; the GRU input
    prev_reps: Tensor | None  # previous visit's transfer outputs (attention keys/values)
    transfer_ctx: Tensor  # attention context, zeros at the first visit
    transfer_weights: Tensor | None
    transfer_out: Tensor  # per-node GRU outputs
    visit_rep: Tensor  # max-pool of transfer_out, 1 x d


@dataclass
class PrefixTrace:
    """Prediction of visit ``t + 1`` from visits ``0..t`` (0-based)."""

    t: int
    visit_weights: Tensor
    o_v: Tensor
    event_weights: Tensor | None
    o_e: Tensor
    gate: Tensor
    fused: Tensor
    y_hat: Tensor


@dataclass
class ForwardTrace:
    visits: list[VisitTrace] = field(default_factory=list)
    prefixes: list[PrefixTrace] = field(default_factory=list)
    loss: Tensor | None = None

    @property
    def predictions(self) -> list[Tensor]:
        return [p.y_hat for p in self.prefixes]


def _placement(rows: Sequence[int], n: int) -> Tensor:
    m = np.zeros((n, len(rows)))
    m[list(rows), np.arange(len(rows))] = 1.0
    return Tensor(m)


class DHCE:
    def __init__(self, params: ModelParameters, hp: HyperParams):
        self.params = params
        self.hp = hp

    @classmethod
    def create(cls, n_codes: int, event_dim: int, hp: HyperParams | None = None, seed: int = 0) -> "DHCE":
        hp = hp or HyperParams()
        return cls(ModelParameters.initialize(n_codes, hp.d, event_dim, seed), hp)

    @property
    def n_codes(self) -> int:
        return self.params["out_b"].cols

    def embed_codes(self, code_indices: Sequence[int]) -> Tensor:
        return nk.take_rows(self.params["embeddings"], code_indices)

    def _add_context(self, base: Tensor, nodes: np.ndarray, x: Tensor, graph, transform: Tensor) -> Tensor:
        rows = np.searchsorted(nodes, graph.nodes)
        ctx = hyper_context(nk.take_rows(x, rows), graph, transform)
        return base + _placement(rows, len(nodes)) @ ctx

    def forward_visit(self, entry: HypergraphEntry, prev: VisitTrace | None) -> VisitTrace:
        p = self.params
        nodes = np.asarray(entry.graph.nodes)
        x = self.embed_codes(nodes)
        reps = x
        if not entry.chronic_graph.empty:
            reps = self._add_context(reps, nodes, x, entry.chronic_graph, p["chronic_ctx"])
        if not entry.acute_graph.empty:
            reps = self._add_context(reps, nodes, x, entry.acute_graph, p["acute_ctx"])
        if prev is None:
            ctx, weights, prev_reps = nk.zeros(len(nodes), self.hp.d), None, None
        else:
            prev_reps = prev.transfer_out
            ctx, weights = transfer_attention(prev_reps, reps, p["attn_query"], p["attn_key"], p["attn_value"])
        out = gru_step(reps, ctx, p)
        return VisitTrace(reps, prev_reps, ctx, weights, out, nk.max_over_rows(out))

    def encode_visits(self, inputs: PatientInputs, upto: int | None = None) -> list[VisitTrace]:
        traces: list[VisitTrace] = []
        for entry in inputs.dyn.entries[:upto]:
            traces.append(self.forward_visit(entry, traces[-1] if traces else None))
        return traces

    def predict_prefix(self, visits: Sequence[VisitTrace], events: EventRepresentation, t: int) -> PrefixTrace:
        o_v, vw = visit_attention(nk.concat([v.visit_rep for v in visits[: t + 1]], axis=0), self.params)
        o_e, ew = aggregate_events(events, self.params, with_weights=True)
        gate, fused, y_hat = fuse_predict(o_v, o_e, self.params, self.hp.output_activation, self.hp.eps_clip)
        return PrefixTrace(t, vw, o_v, ew, o_e, gate, fused, y_hat)

    def forward_patient(self, inputs: PatientInputs) -> ForwardTrace:
        """Teacher-forced predictions of visits 2..T and their mean loss.

        Visit encodings are causal (visit t only sees visits t and t-1), so
        they are computed once and shared by every prefix.
        """
        T = inputs.n_visits
        if T < 2:
            raise ValueError(f"patient {inputs.patient_id!r} needs at least 2 visits, has {T}")
        trace = ForwardTrace(visits=self.encode_visits(inputs, T - 1))
        for t in range(T - 1):
            trace.prefixes.append(self.predict_prefix(trace.visits, inputs.events[t], t))
        trace.loss = sequence_loss(trace.predictions, inputs.targets[1:])
        return trace

    def loss(self, inputs: PatientInputs) -> Tensor:
        return self.forward_patient(inputs).loss

    def batch_loss(self, batch: Sequence[PatientInputs]) -> Tensor:
        total = self.loss(batch[0])
        for inputs in batch[1:]:
            total = total + self.loss(inputs)
        return total * (1.0 / len(batch))

    def batch_loss_terms(self, batch: Sequence[PatientInputs]) -> Tensor:
        """Every per-code loss term of ``batch_loss``, pre-weighted, as one row.

        Summing the row gives the batch loss; finite-difference checks
        difference it term by term.
        """
        rows = []
        for inputs in batch:
            trace = self.forward_patient(inputs)
            w = 1.0 / (len(trace.prefixes) * len(batch))
            rows += [bce_terms(y_hat, y) * w for y_hat, y in zip(trace.predictions, inputs.targets[1:])]
        return nk.concat(rows, axis=1)

    def predict_next(self, inputs: PatientInputs) -> np.ndarray:
        """Scores for the visit after the full history."""
        visits = self.encode_visits(inputs)
        t = len(visits) - 1
        return self.predict_prefix(visits, inputs.events[t], t).y_hat.data[0].copy()

    def prefix_scores(self, inputs: PatientInputs) -> list[np.ndarray]:
        return [p.y_hat.data[0] for p in self.forward_patient(inputs).prefixes]
