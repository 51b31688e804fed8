"""Shared oracles for the test suite: direct-definition convolution and
central finite differences."""

import numpy as np


def naive_conv2d(x, w, stride, groups=1):
    """Direct-definition convolution: the oracle every fast path must match."""
    b, cin, h, wd = x.shape
    co, cig, kh, kw = w.shape
    sh, sw = stride
    ho, wo = (h - kh) // sh + 1, (wd - kw) // sw + 1
    cog = co // groups
    out = np.zeros((b, co, ho, wo), dtype=np.float64)
    for bi in range(b):
        for o in range(co):
            g = o // cog
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cig):
                        cin_idx = g * cig + c
                        for di in range(kh):
                            for dj in range(kw):
                                acc += (
                                    x[bi, cin_idx, i * sh + di, j * sw + dj]
                                    * w[o, c, di, dj]
                                )
                    out[bi, o, i, j] = acc
    return out


def numerical_grad(fn, arr, h=1e-4):
    """Central finite differences of scalar fn at arr, elementwise."""
    grad = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        hi = arr.copy()
        hi[idx] += h
        lo = arr.copy()
        lo[idx] -= h
        grad[idx] = (fn(hi) - fn(lo)) / (2 * h)
    return grad


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def greedy_transcription(values, state, input_size, theta, budget):
    """Independent literal transcription of the selection procedure: sort
    all locations by activation (row-major on ties), scan, keep while every
    kept pair stays strictly below the IoU threshold."""
    from anchornet.patches import iou
    from anchornet.rf import map_location

    rows, cols = values.shape
    entries = sorted(
        ((values[i, j], i, j) for i in range(rows) for j in range(cols)),
        key=lambda e: (-e[0], e[1], e[2]),
    )
    kept = []
    for value, i, j in entries:
        box = map_location(state, (i, j), input_size)
        if all(iou(box, other) < theta for other, _ in kept):
            kept.append((box, value))
        if len(kept) == budget:
            break
    return kept


def literal_sequential_inference(stage_probs, thresholds):
    """Direct transcription of the sequential process: accumulate raw
    softmax outputs, exit when the running max strictly exceeds the stage
    threshold, otherwise answer with the final argmax."""
    t_max = len(stage_probs)
    p = None
    for t in range(1, t_max + 1):
        p = stage_probs[t - 1] if p is None else p + stage_probs[t - 1]
        if t < t_max and p.max() > thresholds[t - 1]:
            return t, int(np.argmax(p))
    return t_max, int(np.argmax(p))


def op_gradient_check(name, seed=None):
    """Finite-difference check of one tensor-engine op; returns the worst
    relative error over the input and every parameter."""
    import zlib

    from anchornet import tensor
    from anchornet.tensor import BatchNormParams, ConvKernel, LinearLayer, Tensor

    rng = np.random.default_rng(zlib.crc32(name.encode()) if seed is None else seed)
    x = Tensor(rng.normal(size=(2, 2, 8, 8)), requires_grad=True)

    params = []
    if name == "conv_dense":
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        params = [w]
        fwd = lambda t: tensor.conv2d_valid(t, ConvKernel(w, stride=(2, 2)))
    elif name == "conv_depthwise":
        w = Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
        params = [w]
        fwd = lambda t: tensor.conv2d_valid(t, ConvKernel(w, stride=(2, 2), groups=2))
    elif name == "conv_1x1":
        w = Tensor(rng.normal(size=(4, 2, 1, 1)), requires_grad=True)
        params = [w]
        fwd = lambda t: tensor.conv2d_valid(t, ConvKernel(w))
    elif name == "gap":
        fwd = tensor.gap
    elif name == "linear":
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        layer = LinearLayer(w, bias=b)
        params = [w, b]
        fwd = lambda t: tensor.linear(tensor.gap(t), layer)
    elif name == "silu":
        fwd = tensor.silu
    elif name in ("batchnorm_train", "batchnorm_infer"):
        bn = BatchNormParams.create(2, dtype=np.float64)
        if name == "batchnorm_infer":
            tensor.batchnorm(Tensor(rng.normal(size=(4, 2, 5, 5))), bn, train=True)
        params = [bn.gamma, bn.beta]
        bn.gamma.data = rng.normal(loc=1.0, scale=0.2, size=2)
        bn.beta.data = rng.normal(size=2)
        train = name == "batchnorm_train"
        fwd = lambda t: tensor.batchnorm(t, bn, train=train)
    elif name == "resize":
        fwd = lambda t: tensor.resize_bilinear(t, (5, 11))
    elif name == "pad":
        fwd = lambda t: tensor.pad2d(t, 2)
    elif name == "crop":
        fwd = lambda t: tensor.center_crop(t, 2)
    elif name == "add":
        other = Tensor(rng.normal(size=(2, 2, 8, 8)), requires_grad=True)
        params = [other]
        fwd = lambda t: tensor.add(t, other)
    else:
        raise ValueError(name)

    out = fwd(x)
    g = rng.normal(size=out.shape)
    out.backward(g)

    def loss_for_x(arr):
        with tensor.no_grad():
            return float(np.sum(fwd(Tensor(arr)).data * g))

    worst = rel_err(x.grad, numerical_grad(loss_for_x, x.data))
    for p in params:
        saved = p.data.copy()

        def loss_for_p(arr, p=p, saved=saved):
            p.data = arr
            with tensor.no_grad():
                val = float(np.sum(fwd(Tensor(x.data)).data * g))
            p.data = saved
            return val

        worst = max(worst, rel_err(p.grad, numerical_grad(loss_for_p, saved)))
    return worst


GRADCHECK_OPS = (
    "conv_dense", "conv_depthwise", "conv_1x1", "gap", "linear", "silu",
    "batchnorm_train", "batchnorm_infer", "resize", "pad", "crop", "add",
)


def miniature_e2e_gradcheck():
    """Full finite-difference sweep over every parameter of a small
    two-block network; returns the worst relative error."""
    from anchornet import tensor as T
    from anchornet.model import ArchSpec, StageSpec, build_anchornet
    from anchornet.tensor import Tensor
    from anchornet.training import cross_entropy_batch

    spec = ArchSpec(
        (StageSpec("conv", 2, 2, 3), StageSpec("mbconv", 2, 1, 3, 2.0),
         StageSpec("mbconv", 2, 1, 3, 2.0)),
        head_channels=4,
        num_classes=3,
    )
    m = build_anchornet(spec, seed=13, dtype=np.float64)
    rng = np.random.default_rng(14)
    x = rng.normal(size=(2, 3, 15, 15))
    labels = np.array([0, 2])

    def loss_value():
        logits = m.logits(Tensor(x), train=True)
        probs = T.softmax(logits.data, axis=1)
        losses, dlogits = cross_entropy_batch(probs, labels)
        return float(losses.mean()), logits, dlogits / len(labels)

    _, logits, dlogits = loss_value()
    logits.backward(dlogits)
    h = 1e-5
    worst = 0.0
    for _, p, _ in m.parameters():
        analytic = p.grad
        flat = p.data.ravel()
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up, _, _ = loss_value()
            flat[k] = orig - h
            dn, _, _ = loss_value()
            flat[k] = orig
            numeric = (up - dn) / (2 * h)
            denom = max(abs(numeric), abs(analytic.ravel()[k]), 1e-6)
            worst = max(worst, abs(analytic.ravel()[k] - numeric) / denom)
    return worst
