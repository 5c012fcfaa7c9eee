"""Joint training with the logic discrepancy loss, and strict evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .corpus import NO_RELATION, AnnotatedSentence, Vocab, decode_bio
from .encoder import EncoderConfig, EncoderParams, EncodingResult, forward
from .logic import GammaConfig, LogicOutputs, NeuralView, deep_logic, discrepancy_terms
from .rules import PredicateSchema, Rule

__all__ = [
    "Adadelta",
    "EpochRecord",
    "Metrics",
    "NumericalError",
    "PRF",
    "SGD",
    "TrainConfig",
    "TrainResult",
    "WeightGradReport",
    "discrepancy_loss",
    "evaluate",
    "gold_relation_ids",
    "predict",
    "prediction_loss",
    "rule_weight_gradient_check",
    "train",
]

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


def _flatten(params: Sequence[Tensor]) -> np.ndarray:
    """Move parameter storage into one contiguous buffer of views."""
    flat = np.concatenate([p.data.ravel() for p in params]) if params else np.zeros(0)
    offset = 0
    for p in params:
        n = p.data.size
        p.data = flat[offset:offset + n].reshape(p.data.shape)
        offset += n
    return flat


def _flat_grad(params: Sequence[Tensor], size: int) -> np.ndarray:
    g = np.zeros(size)
    offset = 0
    for p in params:
        n = p.data.size
        if p.grad is not None:
            g[offset:offset + n] = np.ravel(p.grad)
        offset += n
    return g


class Adadelta:
    """Adadelta over a flat view of all parameters (updates data in place)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1.0, rho: float = 0.95, eps: float = 1e-6):
        self.params = list(params)
        self.lr, self.rho, self.eps = lr, rho, eps
        self.flat = _flatten(self.params)
        self.sq_grad = np.zeros_like(self.flat)
        self.sq_step = np.zeros_like(self.flat)

    def step(self) -> None:
        rho, eps = self.rho, self.eps
        g = _flat_grad(self.params, self.flat.size)
        eg, ex = self.sq_grad, self.sq_step
        eg *= rho
        eg += (1.0 - rho) * g * g
        delta = np.sqrt(ex + eps) / np.sqrt(eg + eps) * g
        ex *= rho
        ex += (1.0 - rho) * delta * delta
        self.flat -= self.lr * delta

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.1):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def gold_relation_ids(result: EncodingResult, sentence: AnnotatedSentence, vocab: Vocab) -> np.ndarray:
    """Gold class of every candidate pair; NO_RELATION when the exact span pair has no triple."""
    gold = {(r.head_span, r.tail_span): r.relation for r in sentence.relations}
    return np.array(
        [vocab.relation_id(gold.get(pair, NO_RELATION)) for pair in result.pairs],
        dtype=np.intp,
    )


def sentence_prediction_loss(result: EncodingResult, sentence: AnnotatedSentence, vocab: Vocab) -> Tensor:
    """-(sum_i log p(tag_i) + sum_pairs log p(rel_pair)) for one sentence."""
    tags = vocab.tag_ids(sentence.entity_labels)
    m = len(tags)
    logp = ad.log_softmax(result.entity_logits)
    loss = -ad.getitem(logp, (np.arange(m), tags)).sum()
    if result.relation_logits is not None:
        rel = gold_relation_ids(result, sentence, vocab)
        rlogp = ad.log_softmax(result.relation_logits)
        loss = loss - ad.getitem(rlogp, (np.arange(len(rel)), rel)).sum()
    return loss


def prediction_loss(
    results: Sequence[EncodingResult], sentences: Sequence[AnnotatedSentence], vocab: Vocab
) -> Tensor:
    """Cross-entropy of entity tags and candidate-pair relations, averaged over sentences."""
    if len(results) != len(sentences):
        raise ValueError("results and sentences differ in length")
    total = None
    for res, sent in zip(results, sentences):
        term = sentence_prediction_loss(res, sent, vocab)
        total = term if total is None else total + term
    return total * (1.0 / len(results))


def discrepancy_loss(logic: LogicOutputs, rules: Sequence[Rule]) -> Tensor:
    """Rule-weighted mean squared gap between neural and logic consequents.

    Rules that never fired contribute zero; the result is a scalar tensor
    that is exactly 0 when nothing fired.
    """
    loss = discrepancy_terms(logic, rules)
    return loss if loss is not None else Tensor(0.0)


@dataclass
class WeightGradReport:
    autodiff: np.ndarray
    closed_form: np.ndarray
    tol: float = 1e-10

    @property
    def max_error(self) -> float:
        if self.autodiff.size == 0:
            return 0.0
        return float(np.max(np.abs(self.autodiff - self.closed_form)))

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol

    def __str__(self) -> str:
        rows = [f"rule {k}: autodiff={a:.12g} closed_form={c:.12g}" for k, (a, c) in enumerate(zip(self.autodiff, self.closed_form))]
        return "\n".join(rows + [f"max abs error {self.max_error:.3g} ({'pass' if self.passed else 'FAIL'})"])


def rule_weight_gradient_check(logic: LogicOutputs, rules: Sequence[Rule], tol: float = 1e-10) -> WeightGradReport:
    """Compare autodiff d(loss)/d(raw weight) with the closed form.

    Closed form per rule: ``(1/(K |Phi_k|)) * sum_phi d_phi * s (1 - s)``
    with ``s = sigmoid(raw weight)`` and ``d_phi`` the squared gap of the
    consequent reached by grounding phi.
    """
    for r in rules:
        r.weight_raw.grad = None
    loss = discrepancy_loss(logic, rules)
    if loss.requires_grad:
        ad.backward(loss)
    auto = np.array([0.0 if r.weight_raw.grad is None else float(r.weight_raw.grad) for r in rules])
    closed = np.zeros(len(rules))
    if logic.fired:
        gap = (logic.y.data - logic.u.data) ** 2
        K = logic.n_rules
        for k, r in enumerate(rules):
            sel = logic.rule_of == k
            if not sel.any():
                continue
            s = 1.0 / (1.0 + math.exp(-r.weight_raw.item()))
            closed[k] = (logic.counts[sel] * gap[sel]).sum() * s * (1.0 - s) / (K * logic.rule_sizes[k])
    for r in rules:
        r.weight_raw.grad = None
    return WeightGradReport(auto, closed, tol)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class PRF:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def update(self, gold: set, pred: set) -> None:
        hit = len(gold & pred)
        self.tp += hit
        self.fp += len(pred) - hit
        self.fn += len(gold) - hit

    def __add__(self, other: "PRF") -> "PRF":
        return PRF(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def to_dict(self) -> dict:
        return {"p": self.precision, "r": self.recall, "f1": self.f1, "tp": self.tp, "fp": self.fp, "fn": self.fn}


@dataclass
class Metrics:
    entity: PRF = field(default_factory=PRF)
    relation: PRF = field(default_factory=PRF)

    def to_dict(self) -> dict:
        return {"entity": self.entity.to_dict(), "relation": self.relation.to_dict()}


def relation_tuples(sentence_entities, triples) -> set:
    """Strict relation identity: both typed spans plus the label."""
    types = dict(sentence_entities)
    return {
        (h, types.get(h), t, types.get(t), rel)
        for h, t, rel in triples
    }


@dataclass
class Prediction:
    entities: list
    relations: list  # (head_span, tail_span, relation)


def predict(
    sentence: AnnotatedSentence, vocab: Vocab, params: EncoderParams, config: EncoderConfig
) -> tuple[Prediction, EncodingResult]:
    with ad.no_grad():
        res = forward(sentence, vocab, params, config, mode="predicted")
    rels = []
    if res.relation_probs is not None:
        names = vocab.relation_list
        for (h, t), k in zip(res.pairs, np.argmax(res.relation_probs.data, axis=-1)):
            if names[k] != NO_RELATION:
                rels.append((h, t, names[k]))
    return Prediction(res.entities, rels), res


def score(gold: Sequence[AnnotatedSentence], predictions: Sequence[Prediction]) -> Metrics:
    """Strict micro P/R/F1; O and NO_RELATION never count."""
    metrics = Metrics()
    for sent, pred in zip(gold, predictions):
        gold_ents = decode_bio(sent.entity_labels)
        metrics.entity.update(set(gold_ents), set(pred.entities))
        gold_rel = relation_tuples(gold_ents, [(r.head_span, r.tail_span, r.relation) for r in sent.relations])
        pred_rel = relation_tuples(pred.entities, pred.relations)
        metrics.relation.update(gold_rel, pred_rel)
    return metrics


def evaluate(
    params: EncoderParams, sentences: Sequence[AnnotatedSentence], vocab: Vocab, config: EncoderConfig
) -> Metrics:
    preds = [predict(s, vocab, params, config)[0] for s in sentences]
    return score(sentences, preds)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    optimizer: str = "adadelta"
    lr: float = 1.0
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 0
    logic_enabled: bool = True
    logic_weight: float = 1.0
    # gold previous-label probability: max(ss_floor, 1 - ss_decay * epoch)
    ss_decay: float = 0.05
    ss_floor: float = 0.5
    threshold_mode: str = "argmax"
    eval_every: int = 0

    def sampling_prob(self, epoch: int) -> float:
        return max(self.ss_floor, 1.0 - self.ss_decay * epoch)


@dataclass
class EpochRecord:
    epoch: int
    loss_y: float
    loss_d: float
    betas: list[float]
    seconds: float
    dev: Metrics | None = None

    def to_dict(self) -> dict:
        d = {"epoch": self.epoch, "loss_y": self.loss_y, "loss_d": self.loss_d, "betas": self.betas, "seconds": self.seconds}
        if self.dev is not None:
            d["dev"] = self.dev.to_dict()
        return d


@dataclass
class TrainResult:
    params: EncoderParams
    history: list[EpochRecord]
    rules: list[Rule]


def _make_optimizer(cfg: TrainConfig, tensors: list[Tensor]):
    if cfg.optimizer == "adadelta":
        return Adadelta(tensors, cfg.lr, cfg.rho, cfg.eps)
    if cfg.optimizer == "sgd":
        return SGD(tensors, cfg.lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def train(
    corpus: Sequence[AnnotatedSentence],
    vocab: Vocab,
    rules: Sequence[Rule],
    schema: PredicateSchema | None,
    encoder_config: EncoderConfig,
    train_config: TrainConfig,
    gamma: GammaConfig = GammaConfig(),
    dev: Sequence[AnnotatedSentence] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
    on_sentence: Callable[[AnnotatedSentence, LogicOutputs, NeuralView], None] | None = None,
    params: EncoderParams | None = None,
) -> TrainResult:
    """Minimize prediction loss + discrepancy loss, one sentence per step.

    Three independent generators derive from ``train_config.seed``:
    parameter init, corpus shuffling / scheduled sampling, and dropout.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    rules = list(rules)
    use_logic = train_config.logic_enabled and bool(rules)
    if use_logic and schema is None:
        raise ValueError("logic needs a predicate schema")
    seeds = np.random.SeedSequence(train_config.seed).spawn(3)
    init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
    if params is None:
        params = EncoderParams.initialize(encoder_config, vocab, init_rng)
    tensors = list(params) + ([r.weight_raw for r in rules] if use_logic else [])
    opt = _make_optimizer(train_config, tensors)
    history: list[EpochRecord] = []

    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        p_gold = train_config.sampling_prob(epoch)
        mode = ("scheduled", p_gold)
        sum_y = sum_d = 0.0
        for idx in order_rng.permutation(len(corpus)):
            sentence = corpus[idx]
            with Graph() as graph:
                res = forward(sentence, vocab, params, encoder_config, mode, order_rng, drop_rng)
                loss_y = sentence_prediction_loss(res, sentence, vocab)
                loss = loss_y
                loss_d_val = 0.0
                if use_logic:
                    view = NeuralView.from_result(res, vocab, schema)
                    logic = deep_logic(rules, view, gamma, train_config.threshold_mode)
                    if on_sentence is not None:
                        on_sentence(sentence, logic, view)
                    loss_d = discrepancy_terms(logic, rules)
                    if loss_d is not None:
                        loss_d_val = loss_d.item()
                        loss = loss + loss_d * train_config.logic_weight
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, sentence {sentence.id!r}: "
                    f"loss_y={loss_y.item()}, loss_d={loss_d_val}"
                )
            graph.backward(loss)
            opt.step()
            opt.zero_grad()
            sum_y += loss_y.item()
            sum_d += loss_d_val
        n = len(corpus)
        record = EpochRecord(
            epoch=epoch,
            loss_y=sum_y / n,
            loss_d=sum_d / n,
            betas=[r.weight for r in rules],
            seconds=time.perf_counter() - t0,
        )
        if dev is not None and train_config.eval_every and (epoch + 1) % train_config.eval_every == 0:
            record.dev = evaluate(params, dev, vocab, encoder_config)
        history.append(record)
        log.info("epoch %d loss_y=%.4f loss_d=%.5f (%.1fs)", epoch, record.loss_y, record.loss_d, record.seconds)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params, history, rules)
