"""Naive reference implementations used as independent test oracles.

Everything here is written with explicit Python loops over indices so it
shares no code path with the vectorized kernels under test.
"""

import math

import numpy as np


def conv1d(x, w, b, stride, pad_left, pad_right, dilation=1):
    c_in, t = x.shape
    c_out, _, k = w.shape
    xp = [[0.0] * pad_left + list(x[c]) + [0.0] * pad_right for c in range(c_in)]
    tp = t + pad_left + pad_right
    t_out = (tp - dilation * (k - 1) - 1) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for j in range(t_out):
            acc = b[o]
            for c in range(c_in):
                for q in range(k):
                    acc += w[o, c, q] * xp[c][j * stride + q * dilation]
            out[o, j] = acc
    return out


def depthwise_conv1d(x, w, b, pad_left, pad_right, dilation=1):
    c, t = x.shape
    k = w.shape[1]
    out = np.zeros((c, t))
    for ch in range(c):
        for j in range(t):
            acc = b[ch]
            for q in range(k):
                src = j - pad_left + q * dilation
                if 0 <= src < t:
                    acc += w[ch, q] * x[ch, src]
            out[ch, j] = acc
    return out


def linear_map(x, w, b):
    out = []
    for o in range(w.shape[0]):
        acc = b[o]
        for i in range(w.shape[1]):
            acc += w[o, i] * x[i]
        out.append(acc)
    return np.array(out)


def attention(q_in, kv_in, heads, p):
    """Loop-based multi-head attention on ``[D, T]`` inputs."""
    def proj(w, bias, x):
        d_out, d_in = w.shape
        t = x.shape[1]
        out = np.zeros((d_out, t))
        for o in range(d_out):
            for j in range(t):
                out[o, j] = bias[o] + sum(w[o, i] * x[i, j] for i in range(d_in))
        return out

    q = proj(p["wq"], p["bq"], q_in)
    k = proj(p["wk"], p["bk"], kv_in)
    v = proj(p["wv"], p["bv"], kv_in)
    d_model, t_q = q.shape
    t_kv = k.shape[1]
    dh = d_model // heads
    ctx = np.zeros((d_model, t_q))
    for h in range(heads):
        rows = range(h * dh, (h + 1) * dh)
        for i in range(t_q):
            scores = [sum(q[r, i] * k[r, j] for r in rows) / math.sqrt(dh) for j in range(t_kv)]
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for r in rows:
                ctx[r, i] = sum(e[j] / z * v[r, j] for j in range(t_kv))
    return proj(p["wo"], p["bo"], ctx)


def overlap_add(frames, hop):
    length, n = frames.shape
    out = np.zeros((n - 1) * hop + length)
    for t in range(n):
        for j in range(length):
            out[t * hop + j] += frames[j, t]
    return out


def interpolate(x, t_out):
    c, t_in = x.shape
    out = np.zeros((c, t_out))
    for j in range(t_out):
        pos = j * (t_in - 1) / (t_out - 1)
        i0 = min(int(math.floor(pos)), t_in - 1)
        i1 = min(i0 + 1, t_in - 1)
        f = pos - i0
        for ch in range(c):
            out[ch, j] = x[ch, i0] * (1 - f) + x[ch, i1] * f
    return out


def layer_norm_stats(y):
    """Per-column mean and population variance by explicit summation."""
    c, t = y.shape
    means, variances = [], []
    for j in range(t):
        col = [y[i, j] for i in range(c)]
        m = sum(col) / c
        means.append(m)
        variances.append(sum((v - m) ** 2 for v in col) / c)
    return np.array(means), np.array(variances)


def si_sdr(est, ref):
    """Projection-based SI-SDR, computed with plain Python floats."""
    est = [float(v) for v in est]
    ref = [float(v) for v in ref]
    dot = sum(a * b for a, b in zip(est, ref))
    rr = sum(b * b for b in ref)
    alpha = dot / rr
    target = [alpha * b for b in ref]
    resid = [a - t for a, t in zip(est, target)]
    return 10 * math.log10(sum(t * t for t in target) / sum(r * r for r in resid))


def power(x):
    total = 0.0
    for v in x:
        total += float(v) * float(v)
    return total / len(x)


def adam_trace(x0, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    x, m, v = float(x0), 0.0, 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        x = x - lr * mh / (math.sqrt(vh) + eps)
        out.append(x)
    return out


def plateau_simulation(losses, lr0, factor=0.5, patience=5, stop_patience=25):
    """Step-through of the plateau rule; returns per-epoch (lr after epoch, counter, stop flag)."""
    best = float("inf")
    counter = 0
    lr = lr0
    trace = []
    for loss in losses:
        if loss < best:
            best = loss
            counter = 0
        else:
            counter += 1
            if counter % patience == 0:
                lr = lr * factor
        trace.append((lr, counter, counter >= stop_patience))
    return trace


def lfilter_direct(b, a, x):
    """Direct-form I IIR filter, ``a[0]`` normalized to 1."""
    b = [float(v) / a[0] for v in b]
    a = [float(v) / a[0] for v in a]
    y = [0.0] * len(x)
    for n in range(len(x)):
        acc = 0.0
        for k in range(len(b)):
            if n - k >= 0:
                acc += b[k] * x[n - k]
        for k in range(1, len(a)):
            if n - k >= 0:
                acc -= a[k] * y[n - k]
        y[n] = acc
    return np.array(y)


def rms(x):
    return math.sqrt(power(x))


def dft_peak_hz(x, fs):
    """Frequency of the largest non-DC DFT magnitude, by direct summation."""
    n = len(x)
    mean = sum(x) / n
    xs = [v - mean for v in x]
    best, best_k = -1.0, 0
    for k in range(1, n // 2 + 1):
        re = sum(xs[t] * math.cos(2 * math.pi * k * t / n) for t in range(n))
        im = sum(xs[t] * math.sin(2 * math.pi * k * t / n) for t in range(n))
        mag = re * re + im * im
        if mag > best:
            best, best_k = mag, k
    return best_k * fs / n


def window_starts(n_samples, window, hop):
    starts = []
    s = 0
    while s + window <= n_samples:
        starts.append(s)
        s += hop
    return starts


def pearson(a, b):
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = math.sqrt(sum((x - ma) ** 2 for x in a))
    db = math.sqrt(sum((y - mb) ** 2 for y in b))
    return num / (da * db)


def lagged_design(eeg, lags):
    """Rows are time, columns are (channel, lag) pairs of EEG samples following time t."""
    c, t = eeg.shape
    cols = []
    for lag in range(lags):
        shifted = np.zeros((c, t))
        shifted[:, : t - lag] = eeg[:, lag:]
        cols.append(shifted)
    return np.concatenate(cols, axis=0).T


def ridge_fit(design, target, alpha):
    d = design.shape[1]
    gram = design.T @ design + alpha * np.eye(d)
    return np.linalg.solve(gram, design.T @ target)


def layer_norm(y, eps=1e-5):
    """Per-column normalization over channels with unit gain and zero shift."""
    means, variances = layer_norm_stats(y)
    out = np.zeros_like(y, dtype=np.float64)
    for j in range(y.shape[1]):
        for i in range(y.shape[0]):
            out[i, j] = (y[i, j] - means[j]) / math.sqrt(variances[j] + eps)
    return out


def decode(s, w, b, hop):
    """Project each frame to ``L`` samples, accumulate at ``hop``, drop the first ``hop`` samples."""
    n_x, t_x = s.shape
    length = w.shape[0]
    frames = np.zeros((length, t_x))
    for t in range(t_x):
        for j in range(length):
            frames[j, t] = b[j] + sum(w[j, i] * s[i, t] for i in range(n_x))
    wave = overlap_add(frames, hop)
    return wave[hop : hop + t_x * hop]


def layer_norm_affine(y, gamma, beta, eps=1e-5):
    normed = layer_norm(y, eps)
    out = np.zeros_like(normed)
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            out[i, j] = gamma[i] * normed[i, j] + beta[i]
    return out


def relu(x):
    return np.array([[v if v > 0 else 0.0 for v in row] for row in x])


def prelu(x, slope):
    return np.array([[v if v > 0 else slope[i] * v for v in row] for i, row in enumerate(x)])


def softmax_rows(x):
    out = np.zeros_like(x, dtype=np.float64)
    for i, row in enumerate(x):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        z = sum(e)
        out[i] = [v / z for v in e]
    return out
