"""Probe functions for the gradient-check suite.

Each case returns ``(f, params)`` where ``f`` recomputes a scalar from the
current parameter values. Parameters are drawn uniformly from [-1, 1];
piecewise-linear inputs are pushed at least 1e-3 away from their kink.
"""

import numpy as np

from st3d import autodiff as ad
from st3d.autodiff import Parameter


def _p(rng, shape, name, away_from_zero=False):
    v = rng.uniform(-1, 1, size=shape)
    if away_from_zero:
        small = np.abs(v) < 1e-3
        v[small] = np.where(v[small] >= 0, 1e-3, -1e-3) + v[small]
    return Parameter(v, name)


def _project(out, rng):
    w = rng.uniform(-1, 1, size=out.shape)
    return ad.sum_all(ad.mul(out, w))


def primitive_cases(seed):
    rng = np.random.default_rng(seed)
    proj = np.random.default_rng(seed + 1000)
    cases = {}

    def add(name, build, *params):
        weights = proj.uniform(-1, 1, size=build().shape)
        cases[name] = (lambda: ad.sum_all(ad.mul(build(), weights)), list(params))

    a, b = _p(rng, (3, 4), "a"), _p(rng, (4, 2), "b")
    add("matmul", lambda: ad.matmul(a, b), a, b)
    c, r = _p(rng, (3, 4), "c"), _p(rng, (1, 4), "r")
    add("add", lambda: ad.add(c, r), c, r)
    add("sub", lambda: ad.sub(c, r), c, r)
    add("mul", lambda: ad.mul(c, r), c, r)
    d = _p(rng, (3, 4), "d")
    add("div", lambda: ad.div(c, ad.add(ad.scale(d, 0.25), 1.0)), c, d)
    add("scale", lambda: ad.scale(c, 3.0), c)
    add("square", lambda: ad.square(c), c)
    add("transpose", lambda: ad.transpose(c), c)
    e = _p(rng, (3, 2), "e")
    add("concat_cols", lambda: ad.concat_cols([c, e]), c, e)
    add("slice_cols", lambda: ad.slice_cols(c, 1, 3), c)
    add("gather_rows", lambda: ad.gather_rows(c, [2, 0, 2, 1]), c)
    add("sum_all", lambda: ad.scale(ad.sum_all(c), 1.0), c)
    add("mean", lambda: ad.mean(c), c)
    add("mean_rows", lambda: ad.mean_rows(c), c)
    seg = np.array([0, 2, 0, 1, 2])
    s5 = _p(rng, (5, 3), "s5")
    add("segment_sum", lambda: ad.segment_sum(s5, seg, 3), s5)
    k = _p(rng, (3, 4), "k", away_from_zero=True)
    add("leaky_relu", lambda: ad.leaky_relu(k), k)
    add("elu", lambda: ad.elu(k), k)
    mask = np.array([[1, 1, 0, 1], [1, 1, 1, 1], [0, 1, 0, 0]], dtype=bool)
    add("softmax_rows", lambda: ad.softmax_rows(c), c)
    add("softmax_rows_masked", lambda: ad.softmax_rows(c, mask), c)
    sc = _p(rng, (5, 2), "sc")
    add("segment_softmax", lambda: ad.segment_softmax(sc, seg, 3), sc)
    add("layer_norm_rows", lambda: ad.layer_norm_rows(c), c)
    y = _p(rng, (3, 4), "y")
    add("pearson_rows", lambda: ad.pearson_rows(c, y), c, y)

    from st3d.msagnet import cross_attention_fuse, gat_layer, mse_loss, pcc_loss

    p8, t8 = _p(rng, (1, 8), "p8"), _p(rng, (1, 8), "t8")
    cases["pcc_loss"] = (lambda: pcc_loss(p8, t8), [p8, t8])
    cases["mse_loss"] = (lambda: mse_loss(c, y), [c, y])
    q, kv = _p(rng, (3, 4), "q"), _p(rng, (5, 4), "kv")
    add("cross_attention_fuse", lambda: cross_attention_fuse(q, kv), q, kv)

    h = _p(rng, (5, 4), "h")
    tgt = np.array([0, 0, 1, 1, 1, 2, 3, 3, 4, 4])
    src = np.array([0, 1, 0, 1, 2, 2, 3, 4, 3, 4])
    ad_dst = [_p(rng, (2, 2), f"dst{i}") for i in range(2)]
    ad_src = [_p(rng, (2, 2), f"src{i}") for i in range(2)]
    vec = [_p(rng, (2, 1), f"vec{i}") for i in range(2)]
    bias = _p(rng, (1, 4), "bias")
    add("gat_layer", lambda: gat_layer(h, tgt, src, 5, 2, ad_dst, ad_src, vec, bias),
        h, bias, *ad_dst, *ad_src, *vec)
    return cases


def toy_model_case(seed):
    """Full loss of a 4-spot, 3-gene model with hidden width 6, every
    parameter drawn from [-1, 1]."""
    from st3d.data.synthetic import SyntheticSpec, generate_synthetic
    from st3d.graph import build_3d_graph
    from st3d.msagnet import MSAGNet, ModelConfig, item_loss, make_train_item

    s = generate_synthetic(SyntheticSpec(layers=2, spots_per_layer=2, genes=3, feature_dim=4, seed=seed))
    g = build_3d_graph(s, 2, 2)
    model = MSAGNet(ModelConfig(feature_dim=4, gene_count=3, hidden_dim=6, gat_heads=2, transformer_heads=2),
                    seed=seed)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value[...] = rng.uniform(-1, 1, size=p.shape)
    item = make_train_item(s, g)
    return (lambda: item_loss(model, item)[0]), model.parameters()
