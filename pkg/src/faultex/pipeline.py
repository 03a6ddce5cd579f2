"""Dataset assembly, grouped LOOCV folds, training with early stopping, evaluation."""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field

import numpy as np

from . import faults, features, seq2seq, templates
from .faults import Taxonomy
from .features import Vocabulary, entity_token, tokenize
from .simulator import EpisodeTrace, M_ERROR_STEPS
from .templates import ExplanationType, FailureContext, PhraseBook
from .worldmodel import Environment, load_environments

E_CORR = "E_corr"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Example:
    """One timestep of the dataset: model features, target tokens, provenance."""

    features: features.FeatureVector
    target: tuple
    episode_id: str
    timestep: int
    env_id: str
    label_class: str  # a cause id for error timesteps, E_corr otherwise
    label_text: str


@dataclass(frozen=True)
class Dataset:
    examples: tuple

    def __len__(self):
        return len(self.examples)

    def subset(self, episode_ids) -> list:
        wanted = set(episode_ids)
        return [ex for ex in self.examples if ex.episode_id in wanted]


def corpus_for(
    envs: dict[str, Environment],
    tax: Taxonomy | None = None,
    phrases: PhraseBook | None = None,
) -> list[str]:
    """Every annotation string the simulator can emit, plus entity tokens.

    Deterministic given the configs, so the vocabulary does not depend on which
    episodes were generated or in how many invocations.
    """
    tax = tax or faults.default_taxonomy()
    book = phrases or templates.default_phrases()
    corpus: list[str] = []
    for cause in tax.causes:
        ctx = FailureContext(tax.record(cause).detecting_action, None, cause, "object")
        corpus.append(templates.scripted_explanation(ExplanationType.CB_H, ctx, book))
    for env_id in sorted(envs):
        env = envs[env_id]
        for entity in env.entities:
            corpus.append(entity_token(entity.name))
        for action in book.rationales:
            for form in ("active", "completed"):
                phrase = book.rationales[action][form]
                for obj in env.objects:
                    for place in env.places:
                        corpus.append(phrase.format(object=obj.name, place=place.name))
    corpus.append(book.start_phrase)
    return corpus


def assemble_dataset(
    traces: list[EpisodeTrace],
    vocab: Vocabulary,
    envs: dict[str, Environment] | None = None,
) -> Dataset:
    """One training example per trace timestep, CB-H labels on the error steps."""
    if not traces:
        raise ValueError("cannot assemble a dataset from zero traces")
    envs = envs or load_environments()
    examples = []
    for trace in traces:
        env = envs[trace.env_id]
        task = trace.task
        phases = trace.phases()
        if trace.fault is not None and sum(p == "error" for p in phases) != M_ERROR_STEPS:
            raise ValueError(f"episode {trace.episode_id}: faulted traces carry exactly {M_ERROR_STEPS} error steps")
        for state, note, phase in zip(trace.states, trace.annotations, phases):
            if not note:
                raise ValueError(f"episode {trace.episode_id}: unannotated timestep {state.timestep}")
            fv = features.extract_features(state, env, task, vocab)
            target = tuple(vocab.encode_text(note)) + (features.END_ID,)
            examples.append(
                Example(
                    features=fv,
                    target=target,
                    episode_id=trace.episode_id,
                    timestep=state.timestep,
                    env_id=trace.env_id,
                    label_class=trace.fault.cause if phase == "error" else E_CORR,
                    label_text=note,
                )
            )
    return Dataset(tuple(examples))


# --- fold plans ---------------------------------------------------------------

@dataclass(frozen=True)
class SimRef:
    episode_id: str
    cause: str


@dataclass(frozen=True)
class Fold:
    index: int
    train_ids: tuple
    val_ids: tuple
    test_ids: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    eval_ids: tuple

    def content_hash(self) -> str:
        doc = {
            "folds": [
                {"train": f.train_ids, "val": f.val_ids, "test": f.test_ids} for f in self.folds
            ],
            "eval": self.eval_ids,
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def make_folds(kitchen_sims: list, office_sims: list, seed: int) -> FoldPlan:
    """Two-step grouped leave-one-out folds over the kitchen simulations.

    Each fold holds out one whole simulation per cause for test and another one
    per cause for validation; the office simulations form the fixed eval set.
    """
    by_cause: dict[str, list[str]] = {}
    for sim in kitchen_sims:
        by_cause.setdefault(sim.cause, []).append(sim.episode_id)
    counts = {len(ids) for ids in by_cause.values()}
    if len(counts) != 1:
        raise ValueError("cause counts are not uniform across the kitchen simulations")
    per_cause = counts.pop()
    if per_cause < 3:
        raise ValueError("need at least three simulations per cause to split train/val/test")
    kitchen_ids = {sim.episode_id for sim in kitchen_sims}
    office_ids = [sim.episode_id for sim in office_sims]
    if kitchen_ids & set(office_ids):
        raise ValueError("office simulations must be disjoint from the kitchen ones")

    rng = random.Random(seed)
    shuffled = {}
    for cause in sorted(by_cause):
        ids = list(by_cause[cause])
        rng.shuffle(ids)
        shuffled[cause] = ids

    folds = []
    for k in range(per_cause):
        test = {shuffled[c][k] for c in shuffled}
        val = {shuffled[c][(k + 1) % per_cause] for c in shuffled}
        train = kitchen_ids - test - val
        folds.append(
            Fold(
                index=k,
                train_ids=tuple(sorted(train)),
                val_ids=tuple(sorted(val)),
                test_ids=tuple(sorted(test)),
            )
        )
    return FoldPlan(folds=tuple(folds), eval_ids=tuple(office_ids))


# --- training ------------------------------------------------------------------

@dataclass(frozen=True)
class Hyperparams:
    batch_size: int = 20
    lr: float = 1e-4
    max_epochs: int = 400
    patience: int = 20


@dataclass
class TrainResult:
    fold_index: int
    params: seq2seq.ModelParams
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    best_epoch: int = 0
    best_val_loss: float = math.inf


def _batches(examples: list, size: int):
    for i in range(0, len(examples), size):
        yield examples[i: i + size]


def _mean_loss(params, examples, batch_size) -> float:
    total, count = 0.0, 0
    for chunk in _batches(examples, batch_size):
        batch = seq2seq.make_batch(chunk)
        logits, _ = seq2seq.forward_batch(params, batch)
        n_tok = batch.tmask.sum()
        total += seq2seq.loss_batch(logits, batch.targets, batch.tmask) * n_tok
        count += n_tok
    return total / count


def _train_fold_task(args) -> "TrainResult":
    dataset, vocab, fold, hp, seed = args
    return train_fold(dataset, vocab, fold, hp, seed)


def train_folds(
    dataset: Dataset,
    vocab: Vocabulary,
    folds: list,
    hp: Hyperparams,
    base_seed: int,
    workers: int = 1,
) -> list:
    """Train several folds, optionally across processes; results ordered by fold."""
    jobs = [(dataset, vocab, fold, hp, base_seed + fold.index) for fold in folds]
    if workers <= 1 or len(jobs) == 1:
        return [_train_fold_task(job) for job in jobs]
    import concurrent.futures

    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(_train_fold_task, jobs))
    return results


def train_fold(dataset: Dataset, vocab: Vocabulary, fold: Fold, hp: Hyperparams, seed: int) -> TrainResult:
    """Train one fold with shuffled minibatches and validation-loss early stopping."""
    train_examples = dataset.subset(fold.train_ids)
    val_examples = dataset.subset(fold.val_ids)
    if not train_examples or not val_examples:
        raise ValueError("fold has empty train or validation split")

    params = seq2seq.init_params(len(vocab), seed=seed)
    state = seq2seq.adam_init(params)
    rng = random.Random(seed)
    result = TrainResult(fold_index=fold.index, params=params)

    order = list(range(len(train_examples)))
    best_params = params.copy()
    for epoch in range(1, hp.max_epochs + 1):
        rng.shuffle(order)
        epoch_loss, n_batches = 0.0, 0
        for chunk_idx in _batches(order, hp.batch_size):
            batch = seq2seq.make_batch([train_examples[i] for i in chunk_idx])
            value, grads = seq2seq.loss_and_grads(params, batch)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"fold {fold.index}: loss diverged at epoch {epoch}, batch {n_batches}"
                )
            params, state = seq2seq.adam_step(params, grads, state, lr=hp.lr)
            epoch_loss += value
            n_batches += 1
        val_loss = _mean_loss(params, val_examples, hp.batch_size)
        result.history.append((epoch, epoch_loss / n_batches, val_loss))
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_params = params.copy()
        elif epoch - result.best_epoch >= hp.patience:
            break
    result.params = best_params
    return result


# --- evaluation ------------------------------------------------------------------

@dataclass(frozen=True)
class LabelCatalog:
    """Normalized canonical strings mapped to their label class."""

    classes: tuple
    by_text: dict

    def class_of(self, text: str) -> str | None:
        return self.by_text.get(" ".join(tokenize(text)))


def build_label_catalog(
    envs: dict[str, Environment],
    tax: Taxonomy | None = None,
    phrases: PhraseBook | None = None,
) -> LabelCatalog:
    tax = tax or faults.default_taxonomy()
    book = phrases or templates.default_phrases()
    by_text: dict[str, str] = {}
    for cause in tax.causes:
        ctx = FailureContext(tax.record(cause).detecting_action, None, cause, "object")
        text = templates.scripted_explanation(ExplanationType.CB_H, ctx, book)
        by_text[" ".join(tokenize(text))] = cause
    for env_id in sorted(envs):
        env = envs[env_id]
        for action in book.rationales:
            for form in ("active", "completed"):
                phrase = book.rationales[action][form]
                for obj in env.objects:
                    for place in env.places:
                        text = phrase.format(object=obj.name, place=place.name)
                        by_text.setdefault(" ".join(tokenize(text)), E_CORR)
    by_text.setdefault(" ".join(tokenize(book.start_phrase)), E_CORR)
    return LabelCatalog(classes=tuple(tax.causes) + (E_CORR,), by_text=by_text)


UNPARSED = "unparsed"


@dataclass
class ConfusionMatrix:
    """Counts with columns = true classes; an extra row tallies unparsed outputs."""

    classes: tuple
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((len(self.classes) + 1, len(self.classes)), dtype=np.int64)

    @property
    def rows(self) -> tuple:
        return self.classes + (UNPARSED,)

    def add(self, true_class: str, predicted_class: str | None):
        col = self.classes.index(true_class)
        row = len(self.classes) if predicted_class is None else self.classes.index(predicted_class)
        self.counts[row, col] += 1

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.classes != other.classes:
            raise ValueError("cannot merge confusion matrices over different classes")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    def matrix7(self) -> np.ndarray:
        return self.counts[: len(self.classes)].copy()

    def column_sums(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def rate(self, row: int, col: int) -> float:
        total = self.counts[:, col].sum()
        return float(self.counts[row, col]) / total if total else 0.0

    def diagonal_dominant(self, true_class: str) -> bool:
        """True-positive rate strictly exceeds every other rate in the column."""
        col = self.classes.index(true_class)
        diag = self.counts[col, col]
        others = [self.counts[r, col] for r in range(self.counts.shape[0]) if r != col]
        return all(diag > o for o in others)

    def to_csv(self) -> str:
        lines = ["predicted\\true," + ",".join(self.classes)]
        for r, name in enumerate(self.rows):
            lines.append(name + "," + ",".join(str(int(x)) for x in self.counts[r]))
        return "\n".join(lines) + "\n"


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    per_class: dict  # class -> (correct, total)
    accuracy: float
    error_accuracy: float  # exact match over error-labelled examples only
    n_examples: int

    def per_class_accuracy(self) -> dict:
        return {c: (v[0] / v[1] if v[1] else 0.0) for c, v in self.per_class.items()}


def evaluate_exact_match(
    params: seq2seq.ModelParams,
    examples: list,
    vocab: Vocabulary,
    catalog: LabelCatalog,
) -> EvalResult:
    """Greedy-decode every example; a prediction counts only on exact string match."""
    confusion = ConfusionMatrix(catalog.classes)
    per_class = {c: [0, 0] for c in catalog.classes}
    correct_total = 0
    err_correct, err_total = 0, 0
    for ex in examples:
        predicted = seq2seq.greedy_decode(params, ex.features, vocab)
        wanted = " ".join(tokenize(ex.label_text))
        hit = predicted == wanted
        confusion.add(ex.label_class, catalog.class_of(predicted))
        per_class[ex.label_class][1] += 1
        if hit:
            per_class[ex.label_class][0] += 1
            correct_total += 1
        if ex.label_class != E_CORR:
            err_total += 1
            err_correct += int(hit)
    return EvalResult(
        confusion=confusion,
        per_class={c: tuple(v) for c, v in per_class.items()},
        accuracy=correct_total / len(examples) if examples else 0.0,
        error_accuracy=err_correct / err_total if err_total else 0.0,
        n_examples=len(examples),
    )


@dataclass(frozen=True)
class FoldEval:
    fold_index: int
    params: seq2seq.ModelParams
    eval_accuracy: float  # exact match on the office error explanations


def select_model(fold_results: list) -> seq2seq.ModelParams:
    """The checkpoint with the best eval accuracy; ties go to the lowest fold index."""
    if not fold_results:
        raise ValueError("no fold results to select from")
    best = fold_results[0]
    for result in fold_results[1:]:
        if result.eval_accuracy > best.eval_accuracy:
            best = result
    return best.params


# --- reports -------------------------------------------------------------------

def report_text(result: EvalResult, extra: dict | None = None) -> str:
    """Flat key=value report for one evaluation."""
    lines = {}
    lines["examples"] = result.n_examples
    lines["exact_match_accuracy"] = f"{result.accuracy:.6f}"
    lines["error_exact_match_accuracy"] = f"{result.error_accuracy:.6f}"
    for cls, (correct, total) in result.per_class.items():
        key = cls.replace(" ", "_")
        lines[f"class.{key}.correct"] = correct
        lines[f"class.{key}.total"] = total
        lines[f"class.{key}.accuracy"] = f"{(correct / total if total else 0.0):.6f}"
        if cls != E_CORR:
            lines[f"class.{key}.diagonal_dominant"] = str(result.confusion.diagonal_dominant(cls)).lower()
    for key, value in (extra or {}).items():
        lines[key] = value
    return "".join(f"{k}={v}\n" for k, v in lines.items())


def build_manifest(seed: int, hp: Hyperparams, plan: FoldPlan, vocab: Vocabulary, notes: dict | None = None) -> dict:
    return {
        "seed": seed,
        "hyperparams": {
            "batch_size": hp.batch_size,
            "lr": hp.lr,
            "max_epochs": hp.max_epochs,
            "patience": hp.patience,
        },
        "fold_plan_sha256": plan.content_hash(),
        "vocab_sha256": vocab.content_hash(),
        "assumptions": {"sims_per_cause": "uniform split of the kitchen corpus across the six causes"},
        **({"notes": notes} if notes else {}),
    }
