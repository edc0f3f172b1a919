"""Teacher-ensemble training with noisy-argmax label aggregation.

The pipeline: split the training data into a private pool and a public
pool, partition the private pool into disjoint shards (one teacher per
shard), train the teachers with the ordinary baseline trainer, have the
ensemble vote on public samples, add Laplace noise of scale b = 1/gamma
to each class's vote count before taking the argmax, and train a student
on the noisily labeled public subset only.

Privacy reporting uses the data-independent bound: one noisy-argmax query
over a vote histogram (which changes by one vote when one private record
changes) is (2 gamma)-DP. Queries compose either naively (epsilon = 2
gamma Q at delta = 0) or through the Laplace RDP curve at scale 1/(2
gamma); the reported bound is the smaller of the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import accountant, gaf, nn
from .errors import BudgetExceeded, ConfigInvalid, DomainError, TooFewSamples
from .market_data import Dataset, LabeledWindow, PatternClass

# Sub-stream ids for deterministic seed fan-out.
_STREAM_SPLIT = 0
_STREAM_PARTITION = 1
_STREAM_NOISE = 2
_STREAM_TEACHER = 3
_STREAM_STUDENT = 4


def _child_seed(seed: int, stream: int, index: int = 0) -> int:
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1)[0])


@dataclass(frozen=True)
class PateConfig:
    """Ensemble knobs. ``noise_scale`` is the Laplace scale b = 1/gamma."""

    teacher_count: int = 10
    noise_scale: float = 1.0
    query_budget: int = 1000
    teacher_epochs: int = 100
    student_epochs: int = 100
    public_fraction: float = 0.2
    target_delta: float = 1e-5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.teacher_count < 2:
            raise ConfigInvalid(f"need >= 2 teachers, got {self.teacher_count}")
        if self.noise_scale <= 0:
            raise ConfigInvalid(f"noise_scale must be > 0, got {self.noise_scale}")
        if self.query_budget < 1:
            raise ConfigInvalid(f"query_budget must be >= 1, got {self.query_budget}")
        if self.teacher_epochs < 0 or self.student_epochs < 0:
            raise ConfigInvalid("epoch counts must be >= 0")
        if not 0.0 < self.public_fraction < 1.0:
            raise ConfigInvalid(
                f"public_fraction must be in (0, 1), got {self.public_fraction}")
        if not 0.0 < self.target_delta < 1.0:
            raise ConfigInvalid(
                f"target_delta must be in (0, 1), got {self.target_delta}")

    @property
    def gamma(self) -> float:
        """Laplace inverse scale; each query is (2 gamma)-DP."""
        return 1.0 / self.noise_scale


@dataclass(frozen=True)
class PateSplit:
    """Disjoint private shards plus the public pool.

    Public labels are withheld from aggregation (teachers label the pool);
    they are retained separately only to measure label quality.
    """

    partitions: tuple[tuple[LabeledWindow, ...], ...]
    public: tuple[LabeledWindow, ...]


def partition_private(private, teacher_count: int,
                      rng: np.random.Generator) -> list[list[LabeledWindow]]:
    """Disjoint shards, sizes balanced within one, stratified by class.

    Items of each class are shuffled and dealt round-robin with a cursor
    that runs across classes, so per-class and total counts both stay
    within one of each other.
    """
    private = list(private)
    if len(private) < teacher_count:
        raise TooFewSamples(
            f"{len(private)} samples cannot fill {teacher_count} partitions")
    by_class: dict[int, list[LabeledWindow]] = {}
    for item in private:
        by_class.setdefault(int(item.label), []).append(item)
    partitions: list[list[LabeledWindow]] = [[] for _ in range(teacher_count)]
    cursor = 0
    for label in sorted(by_class):
        items = by_class[label]
        order = rng.permutation(len(items))
        for j in order:
            partitions[cursor % teacher_count].append(items[j])
            cursor += 1
    return partitions


def split_public_private(items, public_fraction: float,
                         rng: np.random.Generator
                         ) -> tuple[list[LabeledWindow], list[LabeledWindow]]:
    """Shuffle and split into (private pool, public pool)."""
    items = list(items)
    order = rng.permutation(len(items))
    n_public = int(round(public_fraction * len(items)))
    if n_public < 1 or n_public >= len(items):
        raise TooFewSamples(
            f"public fraction {public_fraction} leaves an empty pool")
    public = [items[i] for i in order[:n_public]]
    private = [items[i] for i in order[n_public:]]
    return private, public


def train_teachers(partitions, train_config: nn.TrainConfig,
                   arch: nn.Architecture | None = None,
                   x_eval: np.ndarray | None = None, y_eval=None,
                   eval_every: int = 1, mode: str = "joint"
                   ) -> tuple[list[nn.ModelParams], list[nn.TrainingHistory]]:
    """One baseline-trained model per shard, each on its own seed stream.

    Per-epoch held-out accuracies are recorded per teacher so callers can
    assemble the min/median/max ensemble band.
    """
    teachers, histories = [], []
    for i, part in enumerate(partitions):
        if not part:
            raise TooFewSamples(f"partition {i} is empty")
        x, y = gaf.encode_dataset(part, mode)
        seed_i = _child_seed(train_config.seed, _STREAM_TEACHER, i)
        config_i = nn.TrainConfig(
            learning_rate=train_config.learning_rate,
            momentum=train_config.momentum,
            batch_size=min(train_config.batch_size, len(y)),
            epochs=train_config.epochs,
            seed=seed_i)
        params, history = nn.train_classifier(
            x, y, config_i, arch=arch, x_eval=x_eval, y_eval=y_eval,
            eval_every=eval_every)
        teachers.append(params)
        histories.append(history)
    return teachers, histories


def teacher_band(histories) -> list[tuple[int, float, float, float]]:
    """(epoch, min, median, max) rows across the ensemble's accuracy curves."""
    if not histories or not histories[0].epoch_accuracy:
        return []
    epochs = [e for e, _ in histories[0].epoch_accuracy]
    rows = []
    for k, epoch in enumerate(epochs):
        accs = np.array([h.epoch_accuracy[k][1] for h in histories])
        rows.append((epoch, float(accs.min()), float(np.median(accs)),
                     float(accs.max())))
    return rows


def predict_votes(teachers, x: np.ndarray, classes: int = 8) -> np.ndarray:
    """Per-sample vote histograms, shape (n, classes); rows sum to N_t."""
    votes = np.zeros((len(x), classes), dtype=np.int64)
    for params in teachers:
        for start in range(0, len(x), 200):
            logits, _ = nn.forward(params, x[start:start + 200])
            preds = np.argmax(logits, axis=1)
            votes[np.arange(start, start + len(preds)), preds] += 1
    return votes


def noisy_aggregate(votes, gamma: float,
                    rng: np.random.Generator) -> PatternClass:
    """Argmax of vote counts after i.i.d. Laplace(1/gamma) noise per class.

    gamma = inf forces the noise to zero (plain argmax). Post-noise ties
    resolve to the lowest class index, a probability-zero event for
    finite gamma.
    """
    votes = np.asarray(votes, dtype=np.float64)
    if votes.ndim != 1 or len(votes) != len(PatternClass):
        raise DomainError(f"expected {len(PatternClass)} vote counts")
    if np.any(votes < 0):
        raise DomainError("vote counts must be nonnegative")
    if gamma <= 0:
        raise DomainError(f"gamma must be > 0, got {gamma}")
    noisy = votes + rng.laplace(0.0, 1.0 / gamma, size=len(votes))
    return PatternClass(int(np.argmax(noisy)))


def label_public(teachers, x_public: np.ndarray, gamma: float, budget: int,
                 rng: np.random.Generator, queries: int | None = None
                 ) -> tuple[np.ndarray, int]:
    """Label the first ``queries`` public samples via the noisy ensemble.

    Every query spends privacy budget; asking for more than ``budget``
    raises BudgetExceeded, and the pool must cover the budget.
    """
    queries = budget if queries is None else queries
    if queries > budget:
        raise BudgetExceeded(f"{queries} queries exceed the budget of {budget}")
    if budget > len(x_public):
        raise TooFewSamples(
            f"budget {budget} exceeds public pool of {len(x_public)}")
    votes = predict_votes(teachers, x_public[:queries])
    labels = np.array([int(noisy_aggregate(v, gamma, rng)) for v in votes],
                      dtype=np.int64)
    return labels, queries


def train_student(x_labeled: np.ndarray, noisy_labels, config: nn.TrainConfig,
                  arch: nn.Architecture | None = None,
                  x_eval: np.ndarray | None = None, y_eval=None,
                  eval_every: int = 1) -> tuple[nn.ModelParams, nn.TrainingHistory]:
    """Ordinary (non-private) training on the noisily labeled public subset.

    This function is the student's entire data interface: it never sees
    the private shards or the public pool's true labels.
    """
    if len(x_labeled) == 0:
        raise TooFewSamples("student needs at least one labeled sample")
    return nn.train_classifier(x_labeled, noisy_labels, config, arch=arch,
                               x_eval=x_eval, y_eval=y_eval,
                               eval_every=eval_every)


def pate_epsilon(gamma: float, queries: int, delta: float
                 ) -> accountant.DpGuarantee:
    """Data-independent privacy bound for Q noisy-argmax queries.

    At delta = 0 this is the pure composition 2 gamma Q. For delta > 0 the
    Laplace RDP curve at scale 1/(2 gamma), composed Q times and converted,
    replaces the naive bound whenever it is smaller; the result never
    exceeds 2 gamma Q.
    """
    if gamma <= 0:
        raise DomainError(f"gamma must be > 0, got {gamma}")
    if queries < 1:
        raise DomainError(f"queries must be >= 1, got {queries}")
    if not 0.0 <= delta < 1.0:
        raise DomainError(f"delta must be in [0, 1), got {delta}")
    naive = 2.0 * gamma * queries
    if delta == 0.0:
        return accountant.DpGuarantee(naive, 0.0, math.inf)
    ledger = accountant.PrivacyLedger()
    ledger.record_laplace_queries(b=1.0 / (2.0 * gamma), count=queries)
    composed = accountant.to_dp(accountant.compose(ledger), delta)
    if composed.epsilon < naive:
        return composed
    return accountant.DpGuarantee(naive, delta, math.inf)


@dataclass
class PateRunResult:
    """Everything one pipeline run produces."""

    student: nn.ModelParams
    student_accuracy: float
    teacher_final_accuracies: list[float]
    band: list[tuple[int, float, float, float]]
    queries: int
    guarantee: accountant.DpGuarantee
    noisy_labels: np.ndarray
    clean_label_agreement: float  # fraction of noisy labels matching true ones
    student_history: nn.TrainingHistory = field(repr=False, default=None)


def run_pate(dataset: Dataset, config: PateConfig,
             train_config: nn.TrainConfig | None = None,
             arch: nn.Architecture | None = None, mode: str = "joint",
             band_eval_every: int = 1, band_eval_limit: int | None = None
             ) -> PateRunResult:
    """The four-step pipeline end to end on a synthetic dataset.

    ``band_eval_every`` / ``band_eval_limit`` thin the per-epoch teacher
    evaluation (epoch stride, held-out subset size) to keep large sweeps
    tractable; they do not affect training.
    """
    train_config = train_config or nn.TrainConfig()
    split_rng = np.random.default_rng(_child_seed(config.seed, _STREAM_SPLIT))
    part_rng = np.random.default_rng(_child_seed(config.seed, _STREAM_PARTITION))
    noise_rng = np.random.default_rng(_child_seed(config.seed, _STREAM_NOISE))

    private, public = split_public_private(dataset.train,
                                           config.public_fraction, split_rng)
    partitions = partition_private(private, config.teacher_count, part_rng)

    x_test, y_test = gaf.encode_dataset(dataset.test, mode)
    limit = band_eval_limit or len(y_test)
    teacher_train = nn.TrainConfig(
        learning_rate=train_config.learning_rate,
        momentum=train_config.momentum,
        batch_size=train_config.batch_size,
        epochs=config.teacher_epochs,
        seed=config.seed)
    teachers, histories = train_teachers(
        partitions, teacher_train, arch=arch,
        x_eval=x_test[:limit], y_eval=y_test[:limit],
        eval_every=band_eval_every, mode=mode)

    x_public, y_public_true = gaf.encode_dataset(public, mode)
    budget = min(config.query_budget, len(x_public))
    noisy_labels, used = label_public(teachers, x_public, config.gamma,
                                      budget, noise_rng)
    agreement = float(np.mean(noisy_labels == y_public_true[:used]))

    student_config = nn.TrainConfig(
        learning_rate=train_config.learning_rate,
        momentum=train_config.momentum,
        batch_size=min(train_config.batch_size, used),
        epochs=config.student_epochs,
        seed=_child_seed(config.seed, _STREAM_STUDENT))
    student, student_history = train_student(
        x_public[:used], noisy_labels, student_config, arch=arch,
        x_eval=x_test, y_eval=y_test, eval_every=max(1, config.student_epochs))

    return PateRunResult(
        student=student,
        student_accuracy=nn.evaluate(student, x_test, y_test),
        teacher_final_accuracies=[
            h.epoch_accuracy[-1][1] if h.epoch_accuracy else math.nan
            for h in histories],
        band=teacher_band(histories),
        queries=used,
        guarantee=pate_epsilon(config.gamma, used, config.target_delta),
        noisy_labels=noisy_labels,
        clean_label_agreement=agreement,
        student_history=student_history,
    )
