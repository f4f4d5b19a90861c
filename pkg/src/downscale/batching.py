"""Batch-wise feature extension with predictive models.

Non-core feature batches are sampled jointly with the core features from
their own copula fit, a conditional model per target feature is trained
on that sample, and the core individual table is extended batch by batch
by attaching each model's conditional distribution (categorical) or point
prediction (continuous) row by row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .copula import CopulaModel, fit_copula, sample_all_units
from .errors import DataError, EstimationError
from .rng import RngFactory, draw_rows
from .schema import Coordinate, FeatureSchema, coordinates
from .tables import CoarseTable, IndividualTable, UnitBlock

SOFTMAX = "softmax"
LINEAR = "linear"
CONSTANT = "constant"

L2_PENALTY = 1e-4
LEARNING_RATE = 0.1
MAX_ITER = 2000
GRAD_TOL = 1e-6
RIDGE = 1e-8


@dataclass
class Predictor:
    """Fitted conditional model of one target feature given the core features."""

    target: str
    kind: str
    input_coords: list[Coordinate]
    classes: tuple[str, ...] = ()
    weights: np.ndarray | None = None  # softmax: (c, p+1); linear: (p+1,)
    center: np.ndarray | None = None  # input standardization (continuous coords only)
    scale: np.ndarray | None = None
    constant_probs: np.ndarray | None = None
    constant_value: float = 0.0

    def _encode(self, x: np.ndarray) -> np.ndarray:
        xs = (x - self.center) / self.scale
        return np.hstack([xs, np.ones((xs.shape[0], 1))])

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        if self.kind == CONSTANT:
            return np.tile(self.constant_probs, (x.shape[0], 1))
        scores = self._encode(x) @ self.weights.T
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        return scores

    def predict_value(self, x: np.ndarray) -> np.ndarray:
        if self.kind == CONSTANT:
            return np.full(x.shape[0], self.constant_value)
        return self._encode(x) @ self.weights


def partition_batches(
    schemas: list[FeatureSchema],
) -> tuple[list[FeatureSchema], list[list[FeatureSchema]]]:
    """Split schemas into the core set and batches 1..B (declaration order)."""
    core = [sc for sc in schemas if sc.batch == 0]
    n_batches = max(sc.batch for sc in schemas)
    batches = [[sc for sc in schemas if sc.batch == j] for j in range(1, n_batches + 1)]
    return core, batches


def core_input_matrix(block: UnitBlock, core_schemas: list[FeatureSchema]) -> np.ndarray:
    """Row-wise core inputs: probability vectors as-is, continuous raw values."""
    parts = []
    for sc in core_schemas:
        col = block.columns[sc.name]
        if sc.is_categorical:
            if col.ndim != 2:
                raise DataError(
                    f"core_input_matrix: core feature {sc.name!r} already finalized in {block.unit_id!r}"
                )
            parts.append(col)
        else:
            parts.append(col[:, None])
    return np.hstack(parts)


def sample_joint_batch(
    coarse: CoarseTable,
    schemas_subset: list[FeatureSchema],
    flagged: set[str],
    rng_factory: RngFactory,
    phase_tag: str,
    sd_mode: str,
    identity_fallback: bool = False,
) -> tuple[IndividualTable, CopulaModel]:
    """Sample every unit jointly over a schema subset from a fresh copula fit.

    The restricted coordinate set gets its own correlation estimate and PD
    repair, independent of any larger fit.
    """
    model = fit_copula(coarse, schemas_subset, flagged, sd_mode, identity_fallback)
    blocks = sample_all_units(
        model, schemas_subset, coarse.unit_ids, lambda uid: rng_factory.stream(phase_tag, uid)
    )
    return IndividualTable(blocks), model


def softmax_loss_and_grad(
    weights: np.ndarray, x: np.ndarray, onehot: np.ndarray, l2: float = L2_PENALTY
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy with an L2 penalty on non-bias weights, plus gradient.

    ``x`` already carries the bias column; the penalty excludes it.
    """
    n = x.shape[0]
    scores = x @ weights.T
    scores -= scores.max(axis=1, keepdims=True)
    exp = np.exp(scores)
    probs = exp / exp.sum(axis=1, keepdims=True)
    ce = -np.sum(onehot * np.log(np.maximum(probs, 1e-300))) / n
    penalized = weights.copy()
    penalized[:, -1] = 0.0
    loss = ce + 0.5 * l2 * float(np.sum(penalized**2))
    grad = (probs - onehot).T @ x / n + l2 * penalized
    return loss, grad


def fit_predictor(
    k_table: IndividualTable,
    core_schemas: list[FeatureSchema],
    target: FeatureSchema,
    rng: np.random.Generator,
    max_rows: int | None = None,
    max_iter: int = MAX_ITER,
) -> Predictor:
    """Train the conditional model of ``target`` given the core features.

    Categorical targets are drawn once per row from their sampled
    probability vectors and fitted with full-batch gradient descent on a
    softmax-linear model; continuous targets use ridge least squares.
    Inputs use the probability vectors directly (soft encoding), with
    continuous inputs standardized.
    """
    x = np.vstack([core_input_matrix(b, core_schemas) for b in k_table.blocks])
    input_coords = coordinates(core_schemas)

    if target.is_categorical:
        probs = np.vstack([b.columns[target.name] for b in k_table.blocks])
        y = draw_rows(probs, rng.random(probs.shape[0]))
    else:
        y = np.concatenate([b.columns[target.name] for b in k_table.blocks])

    if max_rows is not None and x.shape[0] > max_rows:
        pick = rng.choice(x.shape[0], size=max_rows, replace=False)
        pick.sort()
        x, y = x[pick], y[pick]

    center = np.zeros(x.shape[1])
    scale = np.ones(x.shape[1])
    j = 0
    for sc in core_schemas:
        if sc.is_categorical:
            j += sc.n_classes
        else:
            sd = float(x[:, j].std())
            center[j] = float(x[:, j].mean())
            scale[j] = sd if sd > 0 else 1.0
            j += 1
    xb = np.hstack([(x - center) / scale, np.ones((x.shape[0], 1))])

    if target.is_categorical:
        observed = np.unique(y)
        if observed.size == 1:
            probs_const = np.zeros(target.n_classes)
            probs_const[int(observed[0])] = 1.0
            return Predictor(target.name, CONSTANT, input_coords, target.classes,
                             center=center, scale=scale, constant_probs=probs_const)
        c = target.n_classes
        onehot = np.zeros((xb.shape[0], c))
        onehot[np.arange(xb.shape[0]), y] = 1.0
        weights = np.zeros((c, xb.shape[1]))
        n = xb.shape[0]
        for it in range(max_iter):
            # same gradient as softmax_loss_and_grad, without the loss bookkeeping
            scores = xb @ weights.T
            scores -= scores.max(axis=1, keepdims=True)
            np.exp(scores, out=scores)
            scores /= scores.sum(axis=1, keepdims=True)
            scores -= onehot
            grad = scores.T @ xb
            grad /= n
            grad[:, :-1] += L2_PENALTY * weights[:, :-1]
            if float(np.linalg.norm(grad)) < GRAD_TOL:
                break
            weights -= LEARNING_RATE * grad
            if it % 200 == 0 and not np.all(np.isfinite(weights)):
                raise EstimationError(f"fit_predictor: non-finite loss for target {target.name!r}")
        loss, _ = softmax_loss_and_grad(weights, xb, onehot)
        if not np.isfinite(loss):
            raise EstimationError(f"fit_predictor: non-finite loss for target {target.name!r}")
        return Predictor(target.name, SOFTMAX, input_coords, target.classes,
                         weights=weights, center=center, scale=scale)

    if np.ptp(y) == 0.0:
        return Predictor(target.name, CONSTANT, input_coords,
                         center=center, scale=scale, constant_value=float(y[0]))
    gram = xb.T @ xb + RIDGE * np.eye(xb.shape[1])
    weights = np.linalg.solve(gram, xb.T @ y)
    if not np.all(np.isfinite(weights)):
        raise EstimationError(f"fit_predictor: non-finite weights for target {target.name!r}")
    return Predictor(target.name, LINEAR, input_coords, weights=weights, center=center, scale=scale)


def extend_with_batch(
    table: IndividualTable,
    core_schemas: list[FeatureSchema],
    batch_schemas: list[FeatureSchema],
    predictors: dict[str, Predictor],
    mode: str = "distribution",
) -> IndividualTable:
    """Attach predicted batch features to every row, keyed by row identity.

    Core cells are never touched.  In ``argmax`` mode categorical
    attachments are sharpened to (numerically strictly positive)
    near-one-hot vectors on the modal class, preserving the downstream
    contract that every cell carries a full distribution.
    """
    if mode not in ("distribution", "argmax"):
        raise DataError(f"extend_with_batch: unknown mode {mode!r}")
    for sc in batch_schemas:
        if sc.name not in predictors:
            raise DataError(f"extend_with_batch: no predictor for feature {sc.name!r}")
    for block in table.blocks:
        x = core_input_matrix(block, core_schemas)
        for sc in batch_schemas:
            pred = predictors[sc.name]
            if sc.is_categorical:
                p = pred.predict_proba(x)
                if mode == "argmax":
                    hard = np.full_like(p, 1e-9 / sc.n_classes)
                    hard[np.arange(p.shape[0]), p.argmax(axis=1)] += 1.0 - 1e-9
                    p = hard
                block.columns[sc.name] = p
            else:
                block.columns[sc.name] = pred.predict_value(x)
    return table


def predictor_to_json(pred: Predictor) -> dict:
    return {
        "target": pred.target,
        "kind": pred.kind,
        "classes": list(pred.classes),
        "input_coords": [[c.feature, c.class_label] for c in pred.input_coords],
        "weights": None if pred.weights is None else pred.weights.tolist(),
        "center": pred.center.tolist(),
        "scale": pred.scale.tolist(),
        "constant_probs": None if pred.constant_probs is None else pred.constant_probs.tolist(),
        "constant_value": pred.constant_value,
    }


def predictor_from_json(doc: dict) -> Predictor:
    return Predictor(
        target=doc["target"],
        kind=doc["kind"],
        input_coords=[Coordinate(f, c) for f, c in doc["input_coords"]],
        classes=tuple(doc["classes"]),
        weights=None if doc["weights"] is None else np.array(doc["weights"]),
        center=np.array(doc["center"]),
        scale=np.array(doc["scale"]),
        constant_probs=None if doc["constant_probs"] is None else np.array(doc["constant_probs"]),
        constant_value=doc["constant_value"],
    )
