import numpy as np
import pytest

from st3d import autodiff as ad
from st3d.autodiff import Parameter, Tensor, grad_check
from st3d.errors import FormatError, UsageError

from gradsuite import primitive_cases

NAMES = sorted(primitive_cases(0))


@pytest.mark.parametrize("name", NAMES)
def test_primitive_gradients(name):
    worst = max(grad_check(*primitive_cases(seed)[name]) for seed in range(10))
    assert worst < 1e-4, f"{name}: {worst:.3g}"


def test_sum_of_squares_gradcheck():
    x = Parameter(np.random.default_rng(0).uniform(-1, 1, (4, 3)), "x")
    assert grad_check(lambda: ad.sum_all(ad.square(x)), [x]) < 1e-7


def test_softmax_uniform_row():
    np.testing.assert_array_equal(ad.softmax_rows(np.zeros((1, 2))).value, [[0.5, 0.5]])


def test_softmax_rows_sum_to_one(rng):
    s = ad.softmax_rows(rng.normal(scale=20, size=(50, 7))).value
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(s > 0)


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), a).value, a)


def test_scale_backward():
    x = Parameter(np.array([[1.0, 2.0]]), "x")
    ad.scale(x, 3.0).backward(np.ones((1, 2)))
    np.testing.assert_array_equal(x.grad, [[3.0, 3.0]])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(UsageError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_fan_out_accumulates():
    x = Parameter(np.array([[2.0]]), "x")
    y = ad.add(ad.mul(x, 3.0), ad.square(x))
    y.backward()
    assert x.grad[0, 0] == 3.0 + 4.0


def test_diamond_graph_visits_nodes_once():
    calls = []
    x = Parameter(np.array([[1.0]]), "x")

    def back(g):
        calls.append(1)
        return (g,)

    mid = Tensor(x.value.copy(), requires_grad=True, parents=(x,), backward=back)
    ad.add(ad.scale(mid, 2.0), ad.scale(mid, 5.0)).backward()
    assert len(calls) == 1 and x.grad[0, 0] == 7.0


def test_deep_chain_does_not_recurse():
    x = Parameter(np.array([[1.0]]), "x")
    y = x
    for _ in range(5000):
        y = ad.scale(y, 1.0)
    y.backward()
    assert x.grad[0, 0] == 1.0


def test_pearson_constant_row_is_zero():
    r = ad.pearson_rows(np.array([[1.0, 1.0, 1.0]]), np.array([[1.0, 2.0, 3.0]]))
    assert r.value[0, 0] == 0.0


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(1, 2))}
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint(params, path)
    back = ad.load_checkpoint(path)
    assert list(back) == ["w", "b"]
    for k in params:
        np.testing.assert_array_equal(back[k], params[k])


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing"])
def test_checkpoint_corruption(tmp_path, mutate):
    path = tmp_path / "m.ckpt"
    ad.save_checkpoint({"w": np.ones((2, 2))}, path)
    data = bytearray(path.read_bytes())
    if mutate == "magic":
        data[0] ^= 0xFF
    elif mutate == "version":
        data[10] = 99
    elif mutate == "truncate":
        data = data[:-5]
    else:
        data += b"\0"
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        ad.load_checkpoint(path)
