"""Downstream classification: dual-frame fusion, fine-tuning, and AUC metrics.

A classifier couples one encoder per cardiac phase (ED and ES), concatenates
their embeddings ED-then-ES, and applies a dense output layer.  Fine-tuning
is either "head-only" (encoders frozen; their features are computed once and
cached) or "end-to-end" (gradients flow through both encoders).

AUC uses the rank-statistic form with the midrank tie convention, so it
matches the O(n^2) pairwise-counting definition exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .anatomy import apply_mask, build_cardiac_mask
from .encoder import EncoderConfig, clone_params, encoder_forward, init_encoder, kaiming_uniform
from .errors import ConfigurationError, InputDataError, UndefinedAUCError
from .optim import AdamState, adam_step
from .phantom import CaseRecord, PhantomDataset
from .tensor import Tape, Tensor, backward, concat, dense, softmax, softmax_cross_entropy


def fuse_features(h_ed: Tensor, h_es: Tensor) -> Tensor:
    """Concatenate per-phase embeddings, order fixed ED-then-ES."""
    if h_ed.shape != h_es.shape:
        raise ConfigurationError(f"fuse_features: dim mismatch {h_ed.shape} vs {h_es.shape}")
    axis = h_ed.data.ndim - 1
    return concat([h_ed, h_es], axis=axis)


@dataclass
class FusedClassifier:
    ed_params: dict
    es_params: dict
    out_w: Tensor              # [K, 2E]
    out_b: Tensor              # [K]
    encoder_cfg: EncoderConfig
    class_names: tuple
    trainable: str = "head-only"    # or "end-to-end"


def init_classifier(encoder_cfg: EncoderConfig, class_names: tuple,
                    rng: np.random.Generator,
                    ed_params: dict | None = None, es_params: dict | None = None,
                    trainable: str = "head-only") -> FusedClassifier:
    if trainable not in ("head-only", "end-to-end"):
        raise ConfigurationError(f"unknown trainable mode {trainable!r}")
    k = len(class_names)
    if k < 2:
        raise ConfigurationError("need >= 2 classes")
    if ed_params is None:
        ed_params = init_encoder(encoder_cfg, rng)
    if es_params is None:
        es_params = init_encoder(encoder_cfg, rng)
    two_e = 2 * encoder_cfg.embed_dim
    return FusedClassifier(
        ed_params=ed_params, es_params=es_params,
        out_w=Tensor(kaiming_uniform(rng, (k, two_e), two_e), requires_grad=True),
        out_b=Tensor(np.zeros(k, dtype=np.float32), requires_grad=True),
        encoder_cfg=encoder_cfg, class_names=tuple(class_names), trainable=trainable)


@dataclass
class TrainCurve:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_macro_auc: list = field(default_factory=list)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 40
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    input_mode: str = "full"        # "full" | "segmented"
    mask_dilate_px: int = 2
    trainable: str = "head-only"    # "head-only" | "end-to-end"

    def validate(self) -> None:
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigurationError("finetune config: epochs >= 1, lr > 0, batch_size >= 1")
        if self.input_mode not in ("full", "segmented"):
            raise ConfigurationError(f"unknown input_mode {self.input_mode!r}")
        if self.trainable not in ("head-only", "end-to-end"):
            raise ConfigurationError(f"finetune.trainable: unknown mode {self.trainable!r}")


def case_inputs(case: CaseRecord, input_mode: str, dilate_px: int = 2) -> tuple:
    """(ed, es) frames, masked by the cardiac-label union when segmented."""
    if input_mode == "full":
        return case.ed_frame, case.es_frame
    ed = apply_mask(case.ed_frame, build_cardiac_mask(case.ed_mask), dilate_px)
    es = apply_mask(case.es_frame, build_cardiac_mask(case.es_mask), dilate_px)
    return ed, es


def _forward_logits(clf: FusedClassifier, ed_batch: np.ndarray, es_batch: np.ndarray) -> Tensor:
    h_ed = encoder_forward(clf.ed_params, Tensor(ed_batch), clf.encoder_cfg)
    h_es = encoder_forward(clf.es_params, Tensor(es_batch), clf.encoder_cfg)
    return dense(fuse_features(h_ed, h_es), clf.out_w, clf.out_b)


def _head_logits(clf: FusedClassifier, feats: Tensor) -> Tensor:
    return dense(feats, clf.out_w, clf.out_b)


def extract_features(clf: FusedClassifier, cases: list, input_mode: str,
                     dilate_px: int = 2, batch: int = 64) -> np.ndarray:
    """Fused (2E) embeddings for a list of cases; pure forward, no tape."""
    out = []
    for start in range(0, len(cases), batch):
        chunk = cases[start:start + batch]
        eds, ess = zip(*(case_inputs(c, input_mode, dilate_px) for c in chunk))
        h_ed = encoder_forward(clf.ed_params, Tensor(np.stack(eds)), clf.encoder_cfg)
        h_es = encoder_forward(clf.es_params, Tensor(np.stack(ess)), clf.encoder_cfg)
        out.append(np.concatenate([h_ed.data, h_es.data], axis=1))
    return np.concatenate(out, axis=0)


def predict_proba(clf: FusedClassifier, case: CaseRecord, input_mode: str = "full",
                  dilate_px: int = 2) -> np.ndarray:
    ed, es = case_inputs(case, input_mode, dilate_px)
    logits = _forward_logits(clf, ed[None] if ed.ndim == 3 else ed, es[None] if es.ndim == 3 else es)
    return softmax(logits.data)[0]


def predict_proba_batch(clf: FusedClassifier, cases: list, input_mode: str = "full",
                        dilate_px: int = 2) -> np.ndarray:
    feats = extract_features(clf, cases, input_mode, dilate_px)
    logits = feats @ clf.out_w.data.T + clf.out_b.data
    return softmax(logits)


def finetune(clf: FusedClassifier, dataset: PhantomDataset, cfg: FinetuneConfig) -> TrainCurve:
    """Train the classifier on the dataset's train split, select best-val-AUC.

    Mutates ``clf`` in place to the best-validation parameters and returns the
    recorded per-epoch curve.
    """
    cfg.validate()
    class_index = {c: i for i, c in enumerate(clf.class_names)}
    for case in dataset.cases:
        if case.class_label not in class_index:
            raise InputDataError(f"case {case.case_id}: label {case.class_label!r} not in classifier classes")
    train = [c for c in dataset.cases if dataset.split[c.case_id] == "train"]
    val = [c for c in dataset.cases if dataset.split[c.case_id] == "val"]
    if not train or not val:
        raise ConfigurationError("finetune: train and validation splits must be nonempty")
    y_train = np.array([class_index[c.class_label] for c in train])
    y_val = np.array([class_index[c.class_label] for c in val])

    head_only = clf.trainable == "head-only"
    params = {"out.w": clf.out_w, "out.b": clf.out_b}
    if not head_only:
        params.update({f"ed.{k}": v for k, v in clf.ed_params.items()})
        params.update({f"es.{k}": v for k, v in clf.es_params.items()})
    state = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(55,)))

    if head_only:
        feats_train = extract_features(clf, train, cfg.input_mode, cfg.mask_dilate_px)
        feats_val = extract_features(clf, val, cfg.input_mode, cfg.mask_dilate_px)
        # Standardize cached features with train-split statistics; the inverse
        # transform is folded into the head weights after training so that
        # prediction paths see raw features.
        feat_mu = feats_train.mean(axis=0)
        feat_sd = feats_train.std(axis=0)
        feat_sd[feat_sd < 1e-8] = 1.0
        feats_train = (feats_train - feat_mu) / feat_sd
        feats_val = (feats_val - feat_mu) / feat_sd
    else:
        inputs_train = [case_inputs(c, cfg.input_mode, cfg.mask_dilate_px) for c in train]
        ed_train = np.stack([t[0] for t in inputs_train])
        es_train = np.stack([t[1] for t in inputs_train])
        inputs_val = [case_inputs(c, cfg.input_mode, cfg.mask_dilate_px) for c in val]
        ed_val = np.stack([t[0] for t in inputs_val])
        es_val = np.stack([t[1] for t in inputs_val])

    curve = TrainCurve()
    best_auc = -np.inf
    best_state = None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with Tape() as tape:
                if head_only:
                    logits = _head_logits(clf, Tensor(feats_train[idx]))
                else:
                    logits = _forward_logits(clf, ed_train[idx], es_train[idx])
                loss = softmax_cross_entropy(logits, y_train[idx])
            backward(tape, loss)
            grads = {k: v.grad for k, v in params.items() if v.grad is not None}
            for v in params.values():
                v.grad = None
            adam_step(params, grads, state)
            losses.append(loss.item())
        curve.train_loss.append(float(np.mean(losses)))

        if head_only:
            val_logits = feats_val @ clf.out_w.data.T + clf.out_b.data
        else:
            feats_val_now = extract_features(clf, val, cfg.input_mode, cfg.mask_dilate_px)
            val_logits = feats_val_now @ clf.out_w.data.T + clf.out_b.data
        val_p = softmax(val_logits)
        shifted = val_logits - val_logits.max(axis=1, keepdims=True)
        val_ce = float(np.mean(np.log(np.exp(shifted).sum(axis=1))
                               - shifted[np.arange(len(y_val)), y_val]))
        curve.val_loss.append(val_ce)
        auc = macro_auc(val_p, y_val)
        curve.val_macro_auc.append(auc)
        if auc > best_auc:
            best_auc = auc
            best_state = ({k: v.data.copy() for k, v in params.items()})

    if best_state is not None:
        for k, v in params.items():
            v.data = best_state[k]
    if head_only:
        clf.out_w.data = clf.out_w.data / feat_sd
        clf.out_b.data = clf.out_b.data - clf.out_w.data @ feat_mu
    return curve


# ---------------------------------------------------------------------------
# rank-based AUC


def binary_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InputDataError("binary_auc: scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0 or n_pos + n_neg != len(labels):
        raise UndefinedAUCError("binary_auc: need both label values (0 and 1) present")
    ranks = rankdata(scores)                    # midrank convention
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(probas, labels) -> float:
    """Unweighted mean one-vs-rest AUC over classes."""
    probas = np.asarray(probas, dtype=np.float64)
    labels = np.asarray(labels)
    if probas.ndim != 2 or probas.shape[0] != labels.shape[0]:
        raise InputDataError("macro_auc: probas must be [N,K] aligned with N labels")
    k = probas.shape[1]
    aucs = []
    for cls in range(k):
        onehot = (labels == cls).astype(int)
        if onehot.sum() == 0 or onehot.sum() == len(labels):
            raise UndefinedAUCError(f"macro_auc: class {cls} missing (or exhaustive) in labels")
        aucs.append(binary_auc(probas[:, cls], onehot))
    return float(np.mean(aucs))
