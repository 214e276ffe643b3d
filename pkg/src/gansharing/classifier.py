"""Patch classifiers (small CNN and a miniature shifted-window transformer),
patient-level splitting, class-balanced augmentation and AUPRC model selection."""

from __future__ import annotations

import copy
import logging
import math
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import functional as F
from .diffmath import layers as L
from .diffmath.tensor import Tensor, no_grad
from .gan import sample_synthetic, split_counts
from .metrics import MetricError, auprc, binary_metrics
from .patchlab import HEALTHY, NON_HEALTHY, PatchRecord, area_resize

log = logging.getLogger(__name__)

MODELS = ("cnn", "swinmini")


class SplitError(ValueError):
    pass


class ShortfallError(ValueError):
    def __init__(self, shortfall: int, needed: int, available: int):
        super().__init__(f"healthy pool short by {shortfall} patches (need {needed}, have {available})")
        self.shortfall, self.needed, self.available = shortfall, needed, available


# -- architectures --------------------------------------------------------------------
def _he(fan_in: int) -> float:
    return math.sqrt(2.0 / fan_in)


def cnn_specs(side: int = 64) -> list:
    """Four conv/BN/ReLU/pool stages, fc(256)+BN+ReLU+dropout, fc(2), log-softmax; He-normal init."""
    if side % 16:
        raise ValueError(f"CNN input side must be divisible by 16, got {side}")
    specs, ch_in = [], 1
    for ch in (16, 32, 64, 128):
        specs += [L.conv2d(ch_in, ch, 3, 1, 1, init_std=_he(9 * ch_in)), L.batchnorm2d(ch), L.relu(),
                  L.max_pool2d(2)]
        ch_in = ch
    flat = 128 * (side // 16) ** 2
    specs += [L.flatten(), L.linear(flat, 256, init_std=_he(flat)), L.batchnorm1d(256), L.relu(),
              L.dropout(0.5), L.linear(256, 2, init_std=math.sqrt(1.0 / 256)), L.log_softmax()]
    return specs


def swinmini_specs(side: int = 64, dim: int = 48, window: int = 4, heads: int = 3) -> list:
    """patch_embed(4) -> 2 blocks -> 2x2 merge -> 2 blocks -> mean pool -> fc(2).

    Blocks alternate unshifted and half-window shifted partitions.
    """
    tokens = side // 4
    if side % 4 or tokens % (2 * window):
        raise ValueError(f"SwinMini side {side} must give a token grid divisible by {2 * window}")
    specs = [L.patch_embed(4, 3, dim), L.layer_norm(dim)]
    for stage in range(2):
        d = dim * 2 ** stage
        if stage:
            specs.append(L.patch_merge(dim))
        for block in range(2):
            specs.append(L.window_attention(d, window, heads, shift=(window // 2) * (block % 2)))
    specs += [L.mean_pool(), L.layer_norm(dim * 2), L.linear(dim * 2, 2), L.log_softmax()]
    return specs


@dataclass
class ModelSpec:
    kind: str = "cnn"
    input_side: int = 64

    def __post_init__(self):
        if self.kind not in MODELS:
            raise ValueError(f"model must be one of {MODELS}, got {self.kind!r}")

    def layer_specs(self) -> list:
        return cnn_specs(self.input_side) if self.kind == "cnn" else swinmini_specs(self.input_side)


def prepare_inputs(kind: str, patches: list, side: int) -> np.ndarray:
    """Stack patch pixels as (N, C, side, side) float32; SwinMini gets a 3-channel stack."""
    arrs = []
    for p in patches:
        px = np.asarray(p.pixels, dtype=np.float32)
        if px.shape != (side, side):
            px = area_resize(px, side).astype(np.float32)
        arrs.append(px)
    x = np.stack(arrs)[:, None]
    if kind == "swinmini":
        x = np.repeat(x, 3, axis=1)
    return np.ascontiguousarray(x)


# -- splitting ---------------------------------------------------------------------------
@dataclass
class SplitSpec:
    fractions: tuple = (0.70, 0.15, 0.15)
    class_balance: bool = True

    def counts(self, n_patients: int) -> tuple:
        """Patient counts per subset; each subset gets at least one patient."""
        n_train = max(1, round(self.fractions[0] * n_patients))
        n_val = max(1, int(self.fractions[1] * n_patients))
        n_train = min(n_train, n_patients - n_val - 1)
        return n_train, n_val, n_patients - n_train - n_val


@dataclass
class Split:
    train: list
    val: list
    test: list
    reserve: list = field(default_factory=list)  # healthy patches from train patients dropped by balancing

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    def patients(self, subset: str) -> set:
        return {p.patient_id for p in getattr(self, subset)}


def _patient_strata(patches: list) -> tuple:
    """Per patient: modal density class, and which labels their patches carry."""
    dens, labels = defaultdict(list), defaultdict(set)
    for p in patches:
        dens[p.patient_id].append(p.density_class)
        labels[p.patient_id].add(p.label)
    densities = {pid: Counter(v).most_common(1)[0][0] for pid, v in dens.items()}
    composition = {pid: "+".join(sorted(v)) for pid, v in labels.items()}
    return densities, composition


def assign_patients(densities: dict, spec: SplitSpec, seed: int, composition: dict | None = None) -> list:
    """Greedy stratified assignment: returns one list of patient ids per subset.

    Each patient goes to the open subset furthest below its target share of
    that patient's density class (plus, when given, its label composition).
    """
    pids = sorted(densities)
    if len(pids) < 3:
        raise SplitError(f"need at least 3 patients to split, got {len(pids)}")
    composition = composition or {}
    caps = spec.counts(len(pids))
    fr = np.asarray(caps, dtype=np.float64) / len(pids)
    rng = np.random.default_rng([seed, 0x5917])
    order = [pids[i] for i in rng.permutation(len(pids))]
    freq = Counter(densities.values())
    order.sort(key=lambda pid: freq[densities[pid]])  # rarest density first; stable keeps shuffle
    groups = [[] for _ in caps]
    per = defaultdict(lambda: np.zeros(len(caps)))
    seen = Counter()
    for pid in order:
        keys = [("d", densities[pid])]
        if pid in composition:
            keys.append(("c", composition[pid]))
        deficit = np.zeros(len(caps))
        for k in keys:
            seen[k] += 1
            deficit += fr * seen[k] - per[k]
        open_ = np.array([len(g) < c for g, c in zip(groups, caps)])
        slack = np.array([(c - len(g)) / c for g, c in zip(groups, caps)])
        score = np.where(open_, deficit + 1e-6 * slack, -np.inf)
        s = int(np.argmax(score))
        groups[s].append(pid)
        for k in keys:
            per[k][s] += 1
    return _refine(groups, densities, composition)


def _pairwise_l1(counts: np.ndarray, sizes: np.ndarray) -> float:
    h = counts / sizes[:, None]
    return float(sum(np.abs(h[i] - h[j]).sum() for i in range(len(h)) for j in range(i + 1, len(h))))


def _refine(groups: list, densities: dict, composition: dict) -> list:
    """Swap patients between subsets while that lowers (subsets missing a class, density L1, label L1).

    Swaps keep every subset's size. Patients sharing (density, composition) are
    interchangeable, so only one representative per kind and subset is tried.
    """
    dens_keys = sorted(set(densities.values()))
    comp_keys = sorted(set(composition.get(p, "") for p in densities))
    kind = {p: (dens_keys.index(densities[p]), comp_keys.index(composition.get(p, ""))) for p in densities}
    sizes = np.array([len(g) for g in groups], dtype=np.float64)
    D = np.zeros((len(groups), len(dens_keys)))
    C = np.zeros((len(groups), len(comp_keys)))
    for s, g in enumerate(groups):
        for p in g:
            D[s, kind[p][0]] += 1
            C[s, kind[p][1]] += 1
    pos = np.array([NON_HEALTHY in c for c in comp_keys])
    neg = np.array([HEALTHY in c.split("+") for c in comp_keys])
    use_labels = bool(composition)

    def cost(D, C):
        missing = 0
        if use_labels:
            missing = int(sum((C[s][pos].sum() == 0) + (C[s][neg].sum() == 0) for s in range(len(C))))
        return missing, round(_pairwise_l1(D, sizes), 12), round(_pairwise_l1(C, sizes), 12)

    current = cost(D, C)
    groups = [list(g) for g in groups]
    while True:
        best = None
        reps = [{} for _ in groups]
        for s, g in enumerate(groups):
            for i, p in enumerate(g):
                reps[s].setdefault(kind[p], i)
        for s in range(len(groups)):
            for t in range(s + 1, len(groups)):
                for ka, ia in reps[s].items():
                    for kb, ib in reps[t].items():
                        if ka == kb:
                            continue
                        D2, C2 = D.copy(), C.copy()
                        D2[s, ka[0]] -= 1; D2[t, ka[0]] += 1; D2[t, kb[0]] -= 1; D2[s, kb[0]] += 1  # noqa: E702
                        C2[s, ka[1]] -= 1; C2[t, ka[1]] += 1; C2[t, kb[1]] -= 1; C2[s, kb[1]] += 1  # noqa: E702
                        c = cost(D2, C2)
                        if c < current and (best is None or c < best[0]):
                            best = (c, s, t, ia, ib, D2, C2)
        if best is None:
            return groups
        current, s, t, ia, ib, D, C = best
        groups[s][ia], groups[t][ib] = groups[t][ib], groups[s][ia]


def split_corpus(patches: list, spec: SplitSpec | None = None, seed: int = 0) -> Split:
    spec = spec or SplitSpec()
    if any(not p.patient_id for p in patches):
        raise SplitError("every patch needs a patient_id")
    densities, composition = _patient_strata(patches)
    groups = assign_patients(densities, spec, seed, composition)
    subsets, reserve = [], []
    rng = np.random.default_rng([seed, 0xBA1])
    for i, g in enumerate(groups):
        members = set(g)
        chosen = [p for p in patches if p.patient_id in members]
        if spec.class_balance:
            pos = [p for p in chosen if p.label == NON_HEALTHY]
            neg = [p for p in chosen if p.label == HEALTHY]
            if not pos or not neg:
                raise SplitError(f"subset {('train', 'val', 'test')[i]} lacks a class "
                                 f"({len(neg)} healthy, {len(pos)} non_healthy)")
            k = min(len(pos), len(neg))
            keep_pos = sorted(rng.choice(len(pos), k, replace=False)) if len(pos) > k else range(k)
            keep_neg = sorted(rng.choice(len(neg), k, replace=False)) if len(neg) > k else range(k)
            kept = {id(pos[j]) for j in keep_pos} | {id(neg[j]) for j in keep_neg}
            if i == 0:
                reserve = [p for p in neg if id(p) not in kept]
            chosen = [p for p in chosen if id(p) in kept]
        subsets.append(chosen)
    return Split(*subsets, reserve=reserve)


# -- augmentation assembly ------------------------------------------------------------------
@dataclass
class SyntheticSource:
    """Lesion patches drawn from a trained generator (or a loaded generator package)."""
    gan: object
    seed: int = 0
    ensemble: bool = True

    @property
    def name(self) -> str:
        return self.gan.gan_id

    def draw(self, count: int, rng: np.random.Generator) -> list:
        return sample_synthetic(self.gan, count, seed=int(rng.integers(2**31)) ^ self.seed,
                                ensemble=self.ensemble)


@dataclass
class RealSource:
    """Real lesion patches from another centre; draws without replacement, capped at what exists."""
    records: list
    name: str = "real"

    def draw(self, count: int, rng: np.random.Generator) -> list:
        pool = [p for p in self.records if p.label == NON_HEALTHY]
        if count > len(pool):
            log.warning("event=real_source_short source=%s requested=%d available=%d",
                        self.name, count, len(pool))
            count = len(pool)
        idx = sorted(rng.choice(len(pool), count, replace=False))
        return [pool[i] for i in idx]


@dataclass
class AugmentationPlan:
    sources: list = field(default_factory=list)
    synthetic_count: int = 1200


def assemble_training_set(base_train: list, plan: AugmentationPlan, healthy_pool: list,
                          rng: np.random.Generator) -> list:
    """base + non-healthy patches split evenly over the sources + the same number of healthy top-ups."""
    if not plan.sources:
        return list(base_train)
    base_ids = {id(p) for p in base_train}
    if any(id(p) in base_ids for p in healthy_pool):
        raise ValueError("healthy_pool overlaps base_train")
    added = []
    for src, n in zip(plan.sources, split_counts(plan.synthetic_count, len(plan.sources))):
        if n:
            added += src.draw(n, rng)
    pool = [p for p in healthy_pool if p.label == HEALTHY]
    if len(pool) < len(added):
        raise ShortfallError(len(added) - len(pool), len(added), len(pool))
    top = [pool[i] for i in sorted(rng.choice(len(pool), len(added), replace=False))]
    return list(base_train) + added + top


# -- training -------------------------------------------------------------------------------
@dataclass
class ClassifierHyper:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float | None = None
    momentum: float = 0.9

    def optimizer(self, kind: str) -> dm.OptimizerState:
        if kind == "cnn":
            return dm.sgd_momentum(self.learning_rate or 1e-3, self.momentum)
        return dm.adam(self.learning_rate or 1e-4, 0.9, 0.999)


@dataclass
class TrainedClassifier:
    spec: ModelSpec
    state: dict
    best_epoch: int
    history: dict
    hyper: ClassifierHyper = field(default_factory=ClassifierHyper)
    model_id: str = ""
    dtype: str = "float32"

    def network(self) -> dm.Sequential:
        net = dm.Sequential(self.spec.layer_specs(), np.random.default_rng(0), np.dtype(self.dtype))
        net.load_state_dict(self.state)
        return net

    def manifest(self) -> dict:
        return {"model": self.spec.kind, "input_side": self.spec.input_side, "best_epoch": self.best_epoch,
                "hyper": asdict(self.hyper), "history": self.history}


def select_best(scores: list) -> int:
    """1-based epoch of the strictly best score; ties keep the earlier epoch."""
    best, best_i = -np.inf, 0
    for i, s in enumerate(scores):
        if s > best:
            best, best_i = s, i
    return best_i + 1


def _labels(patches: list) -> np.ndarray:
    return np.array([1 if p.label == NON_HEALTHY else 0 for p in patches], dtype=np.int64)


def scores_from_log_probs(logp: np.ndarray) -> np.ndarray:
    """P(non_healthy) from 2-class log-probabilities; exactly 0.5 when both are equal."""
    logp = np.asarray(logp, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(logp[:, 0] - logp[:, 1]))


def _forward_scores(net: dm.Sequential, x: np.ndarray, batch: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), batch):
            out.append(net(Tensor(x[i:i + batch]), "eval").data)
    return scores_from_log_probs(np.concatenate(out))


def train_classifier(model_spec, train: list, val: list, hyper: ClassifierHyper | None = None,
                     seed: int = 0, progress=None, dtype=np.float32) -> TrainedClassifier:
    spec = model_spec if isinstance(model_spec, ModelSpec) else ModelSpec(model_spec)
    hyper = hyper or ClassifierHyper()
    if not train or not val:
        raise ValueError("train and val must be non-empty")
    y_val = _labels(val)
    if y_val.min() == y_val.max():
        raise MetricError("validation set has a single class; AUPRC is undefined")
    dtype = np.dtype(dtype)
    x_tr = prepare_inputs(spec.kind, train, spec.input_side).astype(dtype)
    x_val = prepare_inputs(spec.kind, val, spec.input_side).astype(dtype)
    y_tr = _labels(train)
    net = dm.Sequential(spec.layer_specs(), np.random.default_rng([seed, 0xC1A]), dtype)
    opt = dm.Optimizer(net.parameters(), hyper.optimizer(spec.kind))
    rng = np.random.default_rng([seed, 0x7A1])
    history = {"train_loss": [], "val_auprc": []}
    best_state, best_score, best_epoch = None, -np.inf, 0
    bs = hyper.batch_size
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(x_tr))
        losses = []
        for i in range(0, len(order), bs):
            idx = order[i:i + bs]
            if len(idx) < 2 and "batchnorm1d" in net.kinds():
                continue  # batch statistics need two samples
            opt.zero_grad()
            loss = F.nll_loss(net(Tensor(x_tr[idx]), "train", rng), y_tr[idx])
            loss.backward()
            opt.step()
            losses.append(loss.item())
        score = auprc(_forward_scores(net, x_val), y_val)
        history["train_loss"].append(float(np.mean(losses)) if losses else float("nan"))
        history["val_auprc"].append(float(score))
        if score > best_score:
            best_score, best_epoch, best_state = score, epoch, copy.deepcopy(net.state_dict())
        log.debug("event=classifier_epoch model=%s epoch=%d val_auprc=%.4f", spec.kind, epoch, score)
        if progress is not None:
            progress(epoch, score)
    return TrainedClassifier(spec, best_state, best_epoch, history, hyper, dtype=dtype.name)


def predict(model: TrainedClassifier, patches: list) -> list:
    """[(score_non_healthy, predicted_label)]; score >= 0.5 counts as non_healthy."""
    if not patches:
        return []
    x = prepare_inputs(model.spec.kind, patches, model.spec.input_side).astype(model.dtype)
    scores = _forward_scores(model.network(), x)
    return [(float(s), NON_HEALTHY if s >= 0.5 else HEALTHY) for s in scores]


def evaluate(model: TrainedClassifier, patches: list):
    scores = np.array([s for s, _ in predict(model, patches)])
    return binary_metrics(scores, _labels(patches))
