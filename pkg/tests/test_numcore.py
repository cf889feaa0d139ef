import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dgmrec.numcore import (
    Mlp, MlpSpec, NumericError, adam_step, check_finite, grad_check, load_checkpoint, make_adam,
    save_checkpoint,
)


def test_mlp_shapes_and_width_check():
    mlp = Mlp(MlpSpec((4, 7, 3)))
    assert mlp(torch.zeros(5, 4)).shape == (5, 3)
    with pytest.raises(ValueError):
        mlp(torch.zeros(5, 3))
    with pytest.raises(ValueError):
        MlpSpec((4,))


def test_mlp_matches_manual_leaky_relu():
    torch.manual_seed(0)
    mlp = Mlp(MlpSpec((3, 5, 2)))
    x = torch.randn(4, 3)
    a, b = mlp.layers
    h = a(x)
    expected = b(torch.where(h > 0, h, 0.2 * h))
    torch.testing.assert_close(mlp(x), expected)


def test_adam_matches_closed_form_first_step():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0]))
    opt = make_adam([p], lr=0.1)
    (p ** 2).sum().backward()
    adam_step(opt)
    # first bias-corrected step moves each coordinate by lr * sign(grad)
    torch.testing.assert_close(p.detach(), torch.tensor([0.9, -1.9]))
    assert torch.count_nonzero(p.grad) == 0


def test_adam_minimises_quadratic():
    p = torch.nn.Parameter(torch.tensor([3.0, -4.0]))
    opt = make_adam([p], lr=0.1)
    for _ in range(500):
        ((p - torch.tensor([1.0, 2.0])) ** 2).sum().backward()
        adam_step(opt)
    torch.testing.assert_close(p.detach(), torch.tensor([1.0, 2.0]), atol=1e-2, rtol=0)


def test_check_finite():
    check_finite([torch.ones(3)])
    with pytest.raises(NumericError):
        check_finite([torch.tensor([1.0, float("nan")])])


def test_grad_check_accepts_exact_and_flags_wrong():
    torch.manual_seed(1)
    w = torch.randn(6, dtype=torch.float64, requires_grad=True)

    def f():
        return (torch.sin(w) * w ** 2).sum()

    assert grad_check(f, [w], h=1e-5) < 1e-7
    wrong = [torch.autograd.grad(f(), w)[0] * 1.01]
    assert grad_check(f, [w], h=1e-5, analytic=wrong) > 5e-3


def test_grad_check_rejects_nonfinite_point():
    w = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    with pytest.raises(NumericError):
        grad_check(lambda: torch.log(w).sum(), [w])


@given(st.dictionaries(st.text("abcxyz._", min_size=1, max_size=12),
                       st.lists(st.integers(1, 4), min_size=0, max_size=3), max_size=4),
       st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_checkpoint_roundtrip(tmp_path_factory, shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {k: rng.standard_normal(s).astype(np.float32) for k, s in shapes.items()}
    path = tmp_path_factory.mktemp("ck") / "x.ckpt"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, {"w": torch.tensor([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"CKPT"
    assert struct.unpack_from("<I", raw, 4) == (1,)
    assert struct.unpack_from("<I", raw, 8) == (1,) and raw[12:13] == b"w"
    assert struct.unpack_from("<III", raw, 13) == (2, 1, 2)
    assert np.frombuffer(raw[25:], "<f4").tolist() == [1.0, 2.0]
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")
