import numpy as np
import pytest

from .. import autodiff as ad
from ..autodiff import Tensor, Tape, numeric_grad, relative_error
from ..errors import AutodiffError, ShapeError


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check_grad(f, leaves, tol=1e-4):
    """Backward gradients of scalar f() against central differences."""
    ad.zero_grad(leaves)
    f().backward()
    for x in leaves:
        assert relative_error(x.grad, numeric_grad(f, x)) < tol


def test_elementwise_examples():
    """Test add, scale and the mul annihilator."""
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    assert np.array_equal(ad.add(a, b).data, [4.0, 6.0])
    assert np.array_equal(ad.scale(a, 2.0).data, [2.0, 4.0])

    x = Tensor([1.5, -2.0], requires_grad=True)
    y = ad.mul(x, Tensor(np.zeros(2)))
    assert np.array_equal(y.data, [0.0, 0.0])
    ad.sum_(y).backward()
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_elementwise_shape_mismatch():
    """Test that elementwise ops refuse implicit broadcasting."""
    with pytest.raises(ShapeError) as e:
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3,))))
    assert "(2, 3)" in str(e.value) and "(3,)" in str(e.value)


def test_matmul_examples(rng):
    """Test matmul identity, a hand-computed product and its gradients."""
    A = Tensor(rng.standard_normal((2, 2)))
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), A).data, A.data)
    assert np.array_equal(ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])

    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    check_grad(lambda: ad.sum_(ad.square(ad.matmul(a, b))), [a, b], tol=1e-5)

    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_conv2d_examples():
    """Test conv2d identity kernel and all-ones kernel on a constant image."""
    x = Tensor(np.arange(32, dtype=float).reshape(1, 2, 4, 4))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0] = w[1, 1] = 1.0
    assert np.array_equal(ad.conv2d(x, Tensor(w)).data, x.data)

    const = Tensor(np.full((1, 1, 5, 5), 2.0))
    out = ad.conv2d(const, Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 3, 3)
    assert np.allclose(out.data, 18.0)


def test_conv2d_gradients(rng):
    """Test conv2d input and weight gradients with padding and stride."""
    x, w = leaf(rng, 1, 2, 8, 8), leaf(rng, 4, 2, 3, 3)
    check_grad(lambda: ad.sum_(ad.square(ad.conv2d(x, w, pad=1))), [x, w])
    check_grad(lambda: ad.sum_(ad.square(ad.conv2d(x, w, stride=2, pad=1))), [x, w])


def test_conv2d_per_sample_kernels_match_shared(rng):
    """Test that per-sample kernels equal to a shared kernel give bit-identical output."""
    x = Tensor(rng.standard_normal((3, 2, 6, 6)))
    w = rng.standard_normal((4, 2, 3, 3))
    shared = ad.conv2d(x, Tensor(w), pad=1).data
    batched = ad.conv2d(x, Tensor(np.stack([w] * 3)), pad=1).data
    assert np.array_equal(shared, batched)

    per = rng.standard_normal((3, 4, 2, 3, 3))
    out = ad.conv2d(x, Tensor(per), pad=1).data
    for i in range(3):
        single = ad.conv2d(Tensor(x.data[i:i + 1]), Tensor(per[i]), pad=1).data
        assert np.allclose(out[i:i + 1], single, rtol=0, atol=1e-12)


def test_conv2d_per_sample_gradients(rng):
    """Test gradients through batched per-sample kernels."""
    x, w = leaf(rng, 2, 2, 5, 5), leaf(rng, 2, 3, 2, 3, 3)
    check_grad(lambda: ad.sum_(ad.square(ad.conv2d(x, w, pad=1))), [x, w])


def test_conv2d_shape_errors():
    """Test conv2d rejects channel mismatches and even kernels."""
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))))


def test_unet_blocks():
    """Test group_norm, upsample_nearest and concat_channels examples."""
    assert np.array_equal(ad.group_norm(Tensor(np.full((2, 4, 3, 3), 7.0)), 2).data, np.zeros((2, 4, 3, 3)))

    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    up = ad.upsample_nearest(x).data[0, 0]
    assert np.array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    assert np.array_equal(ad.downsample_avg(Tensor(up[None, None])).data, x.data)

    c = ad.concat_channels([Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.ones((2, 3, 3, 3)))])
    assert c.shape == (2, 5, 3, 3)


def test_block_gradients(rng):
    """Test gradients of the U-Net building blocks."""
    x = leaf(rng, 2, 4, 4, 4)
    gamma, beta = leaf(rng, 4), leaf(rng, 4)
    check_grad(lambda: ad.sum_(ad.square(ad.silu(ad.channel_affine(ad.group_norm(x, 2), gamma, beta)))),
               [x, gamma, beta])
    check_grad(lambda: ad.sum_(ad.square(ad.upsample_nearest(x))), [x])
    check_grad(lambda: ad.sum_(ad.square(ad.downsample_avg(x))), [x])
    check_grad(lambda: ad.sum_(ad.square(ad.global_avg_pool(x))), [x])


def test_shape_op_gradients(rng):
    """Test gradients of reshape, transpose, expand, concat, stack and mean."""
    a, b = leaf(rng, 2, 3), leaf(rng, 1, 3)
    check_grad(lambda: ad.sum_(ad.square(ad.transpose(ad.reshape(a, (3, 2)), (1, 0)))), [a])
    check_grad(lambda: ad.sum_(ad.mul(ad.expand(b, (4, 2, 3)), ad.expand(a, (4, 2, 3)))), [a, b])
    check_grad(lambda: ad.sum_(ad.square(ad.concat([a, b], axis=0))), [a, b])
    check_grad(lambda: ad.sum_(ad.square(ad.stack([a, a], axis=1))), [a])
    check_grad(lambda: ad.mean(ad.square(ad.mean(a, axis=1))), [a])
    check_grad(lambda: ad.sum_(ad.div(ad.sqrt(ad.add(ad.square(a), 1.0)), ad.add(ad.abs_(a), 2.0))), [a])


def test_backward_examples():
    """Test sum(x²)/2 gives grad x and that detached leaves get no grad."""
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    ad.scale(ad.sum_(ad.square(x)), 0.5).backward()
    assert np.array_equal(x.grad, x.data)

    y = Tensor([1.0, 2.0], requires_grad=True)
    z = Tensor([3.0, 4.0], requires_grad=True)
    ad.sum_(ad.mul(y.detach(), z)).backward()
    assert y.grad is None
    assert np.array_equal(z.grad, [1.0, 2.0])


def test_composite_graph_gradients(rng):
    """Test conv → norm → activation → sum against finite differences."""
    x, w = leaf(rng, 2, 2, 6, 6), leaf(rng, 4, 2, 3, 3)
    check_grad(lambda: ad.sum_(ad.silu(ad.group_norm(ad.conv2d(x, w, pad=1), 2))), [x, w])


def test_gradients_accumulate_until_zeroed():
    """Test that backward accumulates and zero_grad clears."""
    x = Tensor([2.0], requires_grad=True)
    ad.sum_(ad.square(x)).backward()
    ad.sum_(ad.square(x)).backward()
    assert np.array_equal(x.grad, [8.0])
    ad.zero_grad([x])
    assert x.grad is None


def test_backward_misuse():
    """Test backward errors for non-scalar and untracked losses."""
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(AutodiffError):
        ad.square(x).backward()
    with pytest.raises(AutodiffError):
        ad.sum_(Tensor([1.0, 2.0])).backward()


def test_inference_builds_no_tape():
    """Test that ops on non-grad tensors record nothing."""
    out = ad.silu(ad.add(Tensor([1.0]), Tensor([2.0])))
    assert out.is_leaf and not out.requires_grad
    assert len(Tape.record(out).operations()) == 0


def test_tape_visits_shared_nodes_once():
    """Test the tape is topological and shared subexpressions count once."""
    x = Tensor([3.0], requires_grad=True)
    y = ad.square(x)
    loss = ad.sum_(ad.add(y, y))
    tape = Tape.record(loss)
    assert len(tape.operations()) == 3
    assert tape.nodes[0] is x
    loss.backward()
    assert np.array_equal(x.grad, [12.0])


def test_mul_const_broadcast_rules(rng):
    """Test mul_const accepts broadcastable constants and rejects growing shapes."""
    a = leaf(rng, 2, 3)
    c = rng.standard_normal((2, 1))
    check_grad(lambda: ad.sum_(ad.square(ad.mul_const(a, c))), [a])
    with pytest.raises(ShapeError):
        ad.mul_const(Tensor(np.zeros((3,))), np.zeros((2, 3)))


@pytest.mark.parametrize("seed", range(20))
def test_random_seed_gradient_sweep(seed):
    """Test a mixed graph over many random seeds at tiny shapes."""
    rng = np.random.default_rng(seed)
    x, w, v = leaf(rng, 1, 2, 4, 4), leaf(rng, 2, 2, 3, 3), leaf(rng, 2, 3)

    def f():
        h = ad.global_avg_pool(ad.silu(ad.conv2d(x, w, pad=1)))
        return ad.mean(ad.square(ad.linear(h, v)))
    check_grad(f, [x, w, v])


def test_relu_example_and_gradient(rng):
    """Test relu clamps negatives and passes gradient only where the input is positive."""
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = ad.relu(x)
    assert np.array_equal(y.data, [0.0, 0.0, 2.0])
    ad.sum_(y).backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])
    a = leaf(rng, 3, 4)
    check_grad(lambda: ad.sum_(ad.square(ad.relu(a))), [a])
