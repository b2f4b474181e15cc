"""Multi-level spatial attention graph network.

Forward pass, per sample (all spots of one stack at once):

1. project spot, region and global features to ``hidden_dim``;
2. cross-attend spot features to region and to global features and
   concatenate the three views (width ``3 * hidden_dim``);
3. three chained multi-head GAT layers over the symmetrized spot graph
   with self-loops; each GAT output also feeds its own pre-norm
   transformer encoder layer;
4. the three transformer outputs are mixed with softmax-normalised
   learned scalars;
5. linear heads give spot-, region- and global-level predictions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import TrainingDivergedError, UsageError
from .graph import SpatialGraph
from .imputation import FUSED, KNOWN, UNREACHED, ImputationResult, PropagationConfig, fuse_predictions, propagate_labels
from .records import ExpressionMatrix, SampleStack


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    gene_count: int
    hidden_dim: int = 64
    gat_layers: int = 3
    gat_heads: int = 4
    transformer_heads: int = 4
    lambda_s: float = 0.75
    lambda_r: float = 0.5
    lambda_g: float = 0.5
    lambda_1: float = 0.25
    lambda_2: float = 0.25
    gamma_1: float = 1.0
    gamma_2: float = 1.0
    use_cross_attention: bool = True
    use_gat: bool = True

    def __post_init__(self):
        if self.hidden_dim % self.gat_heads or self.hidden_dim % self.transformer_heads:
            raise UsageError(
                f"hidden_dim {self.hidden_dim} must be divisible by gat_heads {self.gat_heads} "
                f"and transformer_heads {self.transformer_heads}"
            )
        if min(self.feature_dim, self.gene_count, self.hidden_dim, self.gat_layers) < 1:
            raise UsageError("model dimensions must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    final_lr_ratio: float = 0.01
    batch_size: int = 32
    steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise UsageError("lr0, momentum and weight_decay must be non-negative")
        if self.batch_size < 1 or self.steps < 1:
            raise UsageError("batch_size and steps must be positive")


@dataclass
class Predictions:
    p_s: Tensor
    p_r: Tensor
    p_g: Tensor


@dataclass(frozen=True, eq=False)
class SampleInputs:
    """Everything the network reads from one stack."""

    f_s: np.ndarray
    f_r: np.ndarray
    f_g: np.ndarray
    targets: np.ndarray
    sources: np.ndarray

    @property
    def n(self) -> int:
        return self.f_s.shape[0]


def sample_inputs(stack: SampleStack, graph: SpatialGraph) -> SampleInputs:
    if graph.node_count != stack.n_spots:
        raise UsageError(f"graph has {graph.node_count} nodes, stack has {stack.n_spots} spots")
    f_s = stack.features.values
    f_r = stack.region_features.values if stack.region_features is not None else f_s
    f_g = stack.global_features.values if stack.global_features is not None else f_s
    tgt, src = graph.neighbor_lists(self_loops=True)
    return SampleInputs(f_s, f_r, f_g, tgt, src)


# ---------------------------------------------------------------------------
# model


class MSAGNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict = {}
        rng = np.random.default_rng(seed)
        d, D, G = cfg.hidden_dim, cfg.feature_dim, cfg.gene_count
        for lvl in ("s", "r", "g"):
            self._linear(rng, f"proj_{lvl}", D, d)
        dh = d // cfg.gat_heads
        width = 3 * d if cfg.use_cross_attention else d
        for layer in range(cfg.gat_layers):
            self._linear(rng, f"gat{layer}", width, d)
            if cfg.use_gat:
                for k in range(cfg.gat_heads):
                    self._weight(rng, f"gat{layer}.att_dst{k}", dh, dh)
                    self._weight(rng, f"gat{layer}.att_src{k}", dh, dh)
                    self._weight(rng, f"gat{layer}.att_vec{k}", dh, 1)
            width = d
            t = f"tr{layer}"
            self._norm(f"{t}.ln1", d)
            for m in ("q", "k", "v", "o"):
                self._weight(rng, f"{t}.W{m}", d, d)
            self._norm(f"{t}.ln2", d)
            self._linear(rng, f"{t}.ff1", d, 2 * d)
            self._linear(rng, f"{t}.ff2", 2 * d, d)
        self._add("mix", np.zeros((1, cfg.gat_layers)))
        self._linear(rng, "head_s", d, G)
        self._linear(rng, "head_r", 2 * d, G)
        self._linear(rng, "head_g", 2 * d, G)

    # parameter construction
    def _add(self, name, value):
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        self.params[name] = Parameter(value, name)

    def _weight(self, rng, name, fan_in, fan_out):
        bound = math.sqrt(1.0 / fan_in)
        self._add(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def _linear(self, rng, name, fan_in, fan_out):
        self._weight(rng, f"{name}.W", fan_in, fan_out)
        self._add(f"{name}.b", np.zeros((1, fan_out)))

    def _norm(self, name, d):
        self._add(f"{name}.g", np.ones((1, d)))
        self._add(f"{name}.b", np.zeros((1, d)))

    def parameters(self) -> list:
        return list(self.params.values())

    def state_dict(self) -> dict:
        return {k: p.value.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise UsageError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.shape:
                raise UsageError(f"parameter {k}: checkpoint shape {v.shape}, model {p.shape}")
            p.value[...] = v

    # building blocks
    def _lin(self, x, name):
        return ad.add(ad.matmul(x, self.params[f"{name}.W"]), self.params[f"{name}.b"])

    def _layer_norm(self, x, name):
        return ad.add(ad.mul(ad.layer_norm_rows(x), self.params[f"{name}.g"]), self.params[f"{name}.b"])

    def gat(self, x, inp: SampleInputs, layer: int) -> Tensor:
        cfg = self.cfg
        h = ad.matmul(x, self.params[f"gat{layer}.W"])
        bias = self.params[f"gat{layer}.b"]
        if not cfg.use_gat:
            return ad.elu(ad.add(h, bias))
        heads = range(cfg.gat_heads)
        return gat_layer(h, inp.targets, inp.sources, inp.n, cfg.gat_heads,
                         [self.params[f"gat{layer}.att_dst{k}"] for k in heads],
                         [self.params[f"gat{layer}.att_src{k}"] for k in heads],
                         [self.params[f"gat{layer}.att_vec{k}"] for k in heads],
                         bias)

    def transformer(self, x, layer: int) -> Tensor:
        t = f"tr{layer}"
        p = self.params
        heads = self.cfg.transformer_heads
        d = x.shape[1]
        dh = d // heads
        z = self._layer_norm(x, f"{t}.ln1")
        q, k, v = (ad.matmul(z, p[f"{t}.W{m}"]) for m in ("q", "k", "v"))
        outs = []
        for hh in range(heads):
            lo, hi = hh * dh, (hh + 1) * dh
            qh, kh, vh = (ad.slice_cols(m, lo, hi) for m in (q, k, v))
            a = ad.softmax_rows(ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh)))
            outs.append(ad.matmul(a, vh))
        x = ad.add(x, ad.matmul(ad.concat_cols(outs), p[f"{t}.Wo"]))
        z = self._layer_norm(x, f"{t}.ln2")
        return ad.add(x, self._lin(ad.elu(self._lin(z, f"{t}.ff1")), f"{t}.ff2"))

    def forward(self, inp: SampleInputs) -> Predictions:
        cfg = self.cfg
        if inp.f_s.shape[1] != cfg.feature_dim:
            raise UsageError(f"feature width {inp.f_s.shape[1]} does not match model feature_dim {cfg.feature_dim}")
        ps = self._lin(Tensor(inp.f_s), "proj_s")
        pr = self._lin(Tensor(inp.f_r), "proj_r")
        pg = self._lin(Tensor(inp.f_g), "proj_g")
        x = concat_multilevel(ps, pr, pg) if cfg.use_cross_attention else ps
        stages = []
        for layer in range(cfg.gat_layers):
            x = self.gat(x, inp, layer)
            stages.append(self.transformer(x, layer))
        w = ad.softmax_rows(self.params["mix"])
        h = None
        for i, s in enumerate(stages):
            term = ad.mul(s, ad.slice_cols(w, i, i + 1))
            h = term if h is None else ad.add(h, term)
        return Predictions(
            self._lin(h, "head_s"),
            self._lin(ad.concat_cols([h, pr]), "head_r"),
            self._lin(ad.concat_cols([h, pg]), "head_g"),
        )

    __call__ = forward


def cross_attention_fuse(f_s, f_kv) -> Tensor:
    """``softmax(f_s f_kv^T / sqrt(d)) f_kv`` with ``d`` the feature width."""
    f_s, f_kv = ad.as_tensor(f_s), ad.as_tensor(f_kv)
    if f_s.shape[1] != f_kv.shape[1]:
        raise UsageError(f"cross attention: query width {f_s.shape[1]} != key width {f_kv.shape[1]}")
    d = f_s.shape[1]
    att = ad.softmax_rows(ad.scale(ad.matmul(f_s, ad.transpose(f_kv)), 1.0 / math.sqrt(d)))
    return ad.matmul(att, f_kv)


def concat_multilevel(f_s, f_r, f_g) -> Tensor:
    return ad.concat_cols([f_s, cross_attention_fuse(f_s, f_r), cross_attention_fuse(f_s, f_g)])


def gat_layer(h, targets, sources, n, heads, att_dst, att_src, att_vec, bias=None) -> Tensor:
    """Multi-head graph attention on pre-projected features ``h = F W``.

    Head ``k`` uses columns ``[k*dh, (k+1)*dh)`` of ``h``. For each edge
    ``j -> i`` the score is ``a . LeakyReLU(h_i A + h_j B)`` (the
    "dynamic" variant: the nonlinearity sits inside the dot product, so
    the target node's features affect the ranking of its neighbours),
    normalised by softmax over the incoming edges of ``i``. Heads are
    concatenated and passed through ELU.
    """
    d = h.shape[1]
    dh = d // heads
    outs = []
    for k in range(heads):
        hk = ad.slice_cols(h, k * dh, (k + 1) * dh)
        u = ad.gather_rows(ad.matmul(hk, att_dst[k]), targets)
        v = ad.gather_rows(ad.matmul(hk, att_src[k]), sources)
        e = ad.matmul(ad.leaky_relu(ad.add(u, v)), att_vec[k])
        alpha = ad.segment_softmax(e, targets, n)
        msg = ad.mul(ad.gather_rows(hk, sources), alpha)
        outs.append(ad.segment_sum(msg, targets, n))
    out = ad.concat_cols(outs)
    if bias is not None:
        out = ad.add(out, bias)
    return ad.elu(out)


# ---------------------------------------------------------------------------
# losses


def pcc_loss(pred, target, diagnostics: Optional[dict] = None) -> Tensor:
    """Mean over rows of ``1 - Pearson(pred_row, target_row)``.

    Zero-variance rows count as zero correlation (loss 1); their count is
    added to ``diagnostics['constant_rows']`` when a dict is passed.
    """
    pred, target = ad.as_tensor(pred), ad.as_tensor(target)
    if pred.shape[1] < 2:
        raise UsageError("PCC loss needs at least 2 columns")
    if diagnostics is not None:
        const = ad.constant_rows(pred) | ad.constant_rows(target)
        diagnostics["constant_rows"] = diagnostics.get("constant_rows", 0) + int(const.sum())
    return ad.sub(1.0, ad.mean(ad.pearson_rows(pred, target)))


def mse_loss(pred, target) -> Tensor:
    return ad.mean(ad.square(ad.sub(pred, target)))


def total_loss(preds: Predictions, y_s, y_r, y_g, cfg: ModelConfig, diagnostics: Optional[dict] = None):
    """Return ``(L, terms)`` where ``terms`` maps term names to floats."""
    c = cfg
    mse = mse_loss(preds.p_s, y_s)
    ps = pcc_loss(preds.p_s, y_s, diagnostics)
    pr = pcc_loss(preds.p_r, y_r, diagnostics)
    pg = pcc_loss(preds.p_g, y_g, diagnostics)
    l_p = ad.add(ad.add(ad.add(mse, ad.scale(ps, c.lambda_s)), ad.scale(pr, c.lambda_r)), ad.scale(pg, c.lambda_g))
    l_c = ad.add(ad.scale(pcc_loss(preds.p_s, preds.p_r, diagnostics), c.lambda_1),
                 ad.scale(pcc_loss(preds.p_s, preds.p_g, diagnostics), c.lambda_2))
    total = ad.add(ad.scale(l_p, c.gamma_1), ad.scale(l_c, c.gamma_2))
    terms = {"L": total.item(), "L_p": l_p.item(), "L_c": l_c.item(), "mse": mse.item(),
             "P_s": ps.item(), "P_r": pr.item(), "P_g": pg.item()}
    return total, terms


# ---------------------------------------------------------------------------
# optimisation


def cosine_lr(step: int, total_steps: int, lr0: float, final_ratio: float = 0.01) -> float:
    """Cosine decay from ``lr0`` at step 0 to ``final_ratio * lr0`` at the last step."""
    if total_steps <= 1:
        return lr0
    lo = final_ratio * lr0
    frac = step / (total_steps - 1)
    return lo + 0.5 * (lr0 - lo) * (1.0 + math.cos(math.pi * frac))


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay (decay added to the gradient)."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else 0.0
            g = g + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value -= lr * v


@dataclass(frozen=True, eq=False)
class TrainItem:
    """One sample's inputs and labels; the loss only reads ``rows``."""

    inputs: SampleInputs
    y_s: np.ndarray
    y_r: np.ndarray
    y_g: np.ndarray
    rows: np.ndarray
    spot_ids: tuple = ()


def make_train_item(stack: SampleStack, graph: SpatialGraph, rows=None) -> TrainItem:
    from .data.preprocess import aggregate_levels, level_membership

    region, glob = level_membership(stack)
    y_r, y_g, _ = aggregate_levels(stack.expression, region, glob)
    rows = np.arange(stack.n_spots) if rows is None else np.asarray(rows, dtype=np.int64)
    return TrainItem(sample_inputs(stack, graph), stack.expression.values, y_r, y_g, rows,
                     tuple(stack.spot_ids[i] for i in rows))


@dataclass
class TrainResult:
    model: MSAGNet
    trace: list = field(default_factory=list)
    loss_spot_ids: set = field(default_factory=set)


def item_loss(model: MSAGNet, item: TrainItem, diagnostics=None):
    preds = model(item.inputs)
    r = item.rows
    sub = Predictions(ad.gather_rows(preds.p_s, r), ad.gather_rows(preds.p_r, r), ad.gather_rows(preds.p_g, r))
    return total_loss(sub, item.y_s[r], item.y_r[r], item.y_g[r], model.cfg, diagnostics)


def train(items, model_cfg: ModelConfig, train_cfg: TrainConfig, model: Optional[MSAGNet] = None,
          log=None) -> TrainResult:
    """SGD + momentum with a cosine learning-rate schedule.

    A batch is a set of whole samples; the batch loss is the mean of the
    per-sample losses.  Sample order is reshuffled each pass with the
    configured seed.
    """
    items = list(items)
    if not items:
        raise UsageError("training needs at least one sample")
    if model is None:
        model = MSAGNet(model_cfg, seed=train_cfg.seed)
    opt = SGD(model.parameters(), train_cfg.momentum, train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    result = TrainResult(model)
    for it in items:
        result.loss_spot_ids.update(it.spot_ids)

    queue: list = []
    for step in range(train_cfg.steps):
        batch = []
        while len(batch) < min(train_cfg.batch_size, len(items)):
            if not queue:
                queue = list(rng.permutation(len(items)))
            batch.append(queue.pop(0))
        lr = cosine_lr(step, train_cfg.steps, train_cfg.lr0, train_cfg.final_lr_ratio)
        opt.zero_grad()
        sums = {}
        for idx in batch:
            loss, terms = item_loss(model, items[idx])
            ad.scale(loss, 1.0 / len(batch)).backward()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v / len(batch)
        if not all(math.isfinite(v) for v in sums.values()):
            raise TrainingDivergedError(step, sums)
        opt.step(lr)
        row = {"step": step, "lr": lr, "L": sums["L"], "L_p": sums["L_p"], "L_c": sums["L_c"]}
        result.trace.append(row)
        if log is not None:
            log(row)
    return result


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "lr", "L", "L_p", "L_c"))
        for r in trace:
            w.writerow((r["step"], repr(r["lr"]), repr(r["L"]), repr(r["L_p"]), repr(r["L_c"])))


def save_model(model: MSAGNet, directory) -> None:
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ad.save_checkpoint(model.params, directory / "model.ckpt")
    (directory / "model.json").write_text(json.dumps(asdict(model.cfg), indent=1, sort_keys=True) + "\n")


def load_model(directory) -> MSAGNet:
    from pathlib import Path
    from .errors import FormatError
    directory = Path(directory)
    try:
        cfg = ModelConfig(**json.loads((directory / "model.json").read_text()))
    except FileNotFoundError:
        raise FormatError(f"{directory / 'model.json'} not found") from None
    except (TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{directory / 'model.json'}: {exc}") from None
    model = MSAGNet(cfg)
    model.load_state_dict(ad.load_checkpoint(directory / "model.ckpt"))
    return model


# ---------------------------------------------------------------------------
# inference


def predict_expression(model: MSAGNet, stack: SampleStack, graph: SpatialGraph) -> ExpressionMatrix:
    preds = model(sample_inputs(stack, graph))
    return ExpressionMatrix(preds.p_s.value, stack.expression.gene_names, stack.spot_ids)


def predict_with_imputation(stack: SampleStack, graph: SpatialGraph, model: MSAGNet, known_mask,
                            alpha: float, prop_cfg: PropagationConfig = PropagationConfig(),
                            model_pred: Optional[ExpressionMatrix] = None) -> ImputationResult:
    """Fuse model predictions with labels propagated from the known spots.

    Known rows return their labels. Unknown rows reached by propagation
    get ``alpha * model + (1 - alpha) * propagated``; unreached rows keep
    the model prediction.
    """
    known = np.asarray(known_mask, dtype=bool)
    if model_pred is None:
        model_pred = predict_expression(model, stack, graph)
    if not known.any():
        out = model_pred.values.copy()
        return ImputationResult(model_pred.with_values(out), tuple(UNREACHED for _ in known), alpha)
    labels = stack.expression.with_values(np.where(known[:, None], stack.expression.values, 0.0))
    prop = propagate_labels(graph, labels, known, prop_cfg)
    fused = fuse_predictions(model_pred, prop.predictions, alpha).values
    reached = prop.reached_mask
    out = np.where(reached[:, None], fused, model_pred.values)
    out[known] = stack.expression.values[known]
    prov = tuple(KNOWN if k else (FUSED if r else UNREACHED) for k, r in zip(known, reached))
    return ImputationResult(stack.expression.with_values(out), prov, alpha)
