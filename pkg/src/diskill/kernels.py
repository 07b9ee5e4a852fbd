"""Hot numeric kernels, each in a numba and a pure-numpy flavor.

Flat parameter layout of a dense net with ``dims = [n0, n1, ..., nL]``:
for every layer ``l`` the weight matrix ``W_l`` of shape ``(n_{l+1}, n_l)``
in row-major order, followed by the bias ``b_l`` of length ``n_{l+1}``.
Hidden layers use tanh, the output layer is linear.

The activation buffer returned by the forward kernels has shape
``(B, sum(dims))``: the input followed by each layer's post-activation
output. The backward kernels consume it.

The module-level names ``dense_forward``, ``dense_backward`` and
``pd_rollout`` point at the numba flavor unless ``DISKILL_NUMBA=0``.
"""
import numpy as np

from ._jit import USE_NUMBA, njit


# ---------------------------------------------------------------- numpy path

def _np_dense_forward(params, dims, X):
    B = X.shape[0]
    acts = np.empty((B, int(dims.sum())))
    acts[:, : dims[0]] = X
    p = 0
    a = 0
    h = X
    n_layers = len(dims) - 1
    for l in range(n_layers):
        n_in, n_out = int(dims[l]), int(dims[l + 1])
        W = params[p : p + n_out * n_in].reshape(n_out, n_in)
        b = params[p + n_out * n_in : p + n_out * n_in + n_out]
        z = h @ W.T + b
        h = z if l == n_layers - 1 else np.tanh(z)
        acts[:, a + n_in : a + n_in + n_out] = h
        p += n_out * n_in + n_out
        a += n_in
    return acts


def _np_dense_backward(params, dims, acts, gout):
    n_layers = len(dims) - 1
    grad = np.zeros_like(params)
    p_off = np.zeros(n_layers, dtype=np.int64)
    a_off = np.zeros(n_layers, dtype=np.int64)
    p = a = 0
    for l in range(n_layers):
        p_off[l], a_off[l] = p, a
        p += int(dims[l + 1] * dims[l] + dims[l + 1])
        a += int(dims[l])
    delta = np.array(gout, dtype=np.float64)
    for l in range(n_layers - 1, -1, -1):
        n_in, n_out = int(dims[l]), int(dims[l + 1])
        h_in = acts[:, a_off[l] : a_off[l] + n_in]
        if l != n_layers - 1:
            h_out = acts[:, a_off[l] + n_in : a_off[l] + n_in + n_out]
            delta = delta * (1.0 - h_out * h_out)
        W = params[p_off[l] : p_off[l] + n_out * n_in].reshape(n_out, n_in)
        grad[p_off[l] : p_off[l] + n_out * n_in] = (delta.T @ h_in).ravel()
        grad[p_off[l] + n_out * n_in : p_off[l] + n_out * n_in + n_out] = delta.sum(axis=0)
        delta = delta @ W
    return grad, delta


def _np_pd_rollout(q_des, dq_des, q0, kp, kd, a_max, dt):
    B, T, J = q_des.shape
    q = np.array(q0, dtype=np.float64, copy=True)
    dq = np.zeros((B, J))
    traj = np.empty((B, T + 1, J))
    step_cost = np.empty((B, T))
    traj[:, 0] = q
    for t in range(T):
        a = kp * (q_des[:, t] - q) + kd * (dq_des[:, t] - dq)
        a = np.minimum(np.maximum(a, -a_max), a_max)
        step_cost[:, t] = (a * a).sum(axis=1)
        dq = dq + a * dt
        q = q + dq * dt
        traj[:, t + 1] = q
    return traj, dq, step_cost


# ---------------------------------------------------------------- numba path

@njit
def _nb_dense_forward(params, dims, X):
    B = X.shape[0]
    acts = np.empty((B, dims.sum()))
    acts[:, : dims[0]] = X
    n_layers = dims.shape[0] - 1
    h = X.copy()
    p = 0
    a = dims[0]
    for l in range(n_layers):
        n_in = dims[l]
        n_out = dims[l + 1]
        W = params[p : p + n_out * n_in].reshape((n_out, n_in))
        z = np.dot(h, W.T)
        bias = params[p + n_out * n_in : p + n_out * n_in + n_out]
        last = l == n_layers - 1
        for r in range(B):
            for j in range(n_out):
                v = z[r, j] + bias[j]
                if not last:
                    # libm tanh is several times slower here; abs error ~1e-16
                    v = 1.0 - 2.0 / (np.exp(2.0 * v) + 1.0)
                z[r, j] = v
                acts[r, a + j] = v
        h = z
        p += n_out * n_in + n_out
        a += n_out
    return acts


@njit
def _nb_dense_backward(params, dims, acts, gout):
    n_layers = dims.shape[0] - 1
    B = acts.shape[0]
    grad = np.zeros_like(params)
    p_off = np.zeros(n_layers, dtype=np.int64)
    a_off = np.zeros(n_layers, dtype=np.int64)
    p = 0
    a = 0
    for l in range(n_layers):
        p_off[l] = p
        a_off[l] = a
        p += dims[l + 1] * dims[l] + dims[l + 1]
        a += dims[l]
    delta = gout.copy()
    for l in range(n_layers - 1, -1, -1):
        n_in = dims[l]
        n_out = dims[l + 1]
        ai = a_off[l]
        ao = ai + n_in
        po = p_off[l]
        if l != n_layers - 1:
            for r in range(B):
                for j in range(n_out):
                    h = acts[r, ao + j]
                    delta[r, j] *= 1.0 - h * h
        h_in = np.ascontiguousarray(acts[:, ai:ao])
        gW = np.dot(delta.T, h_in)
        grad[po : po + n_out * n_in] = gW.ravel()
        for j in range(n_out):
            s = 0.0
            for r in range(B):
                s += delta[r, j]
            grad[po + n_out * n_in + j] = s
        W = np.ascontiguousarray(params[po : po + n_out * n_in].reshape((n_out, n_in)))
        delta = np.dot(delta, W)
    return grad, delta


@njit
def _nb_pd_rollout(q_des, dq_des, q0, kp, kd, a_max, dt):
    B, T, J = q_des.shape
    traj = np.empty((B, T + 1, J))
    step_cost = np.empty((B, T))
    dq_final = np.empty((B, J))
    for b in range(B):
        for j in range(J):
            traj[b, 0, j] = q0[b, j]
        for j in range(J):
            q = q0[b, j]
            dq = 0.0
            for t in range(T):
                a = kp * (q_des[b, t, j] - q) + kd * (dq_des[b, t, j] - dq)
                if a > a_max:
                    a = a_max
                elif a < -a_max:
                    a = -a_max
                if j == 0:
                    step_cost[b, t] = a * a
                else:
                    step_cost[b, t] += a * a
                dq = dq + a * dt
                q = q + dq * dt
                traj[b, t + 1, j] = q
            dq_final[b, j] = dq
    return traj, dq_final, step_cost


def _nb_pd_rollout_wrapper(q_des, dq_des, q0, kp, kd, a_max, dt):
    return _nb_pd_rollout(
        np.ascontiguousarray(q_des, dtype=np.float64),
        np.ascontiguousarray(dq_des, dtype=np.float64),
        np.ascontiguousarray(q0, dtype=np.float64),
        float(kp), float(kd), float(a_max), float(dt),
    )


def _nb_forward_wrapper(params, dims, X):
    return _nb_dense_forward(params, dims, np.ascontiguousarray(X, dtype=np.float64))


def _nb_backward_wrapper(params, dims, acts, gout):
    return _nb_dense_backward(params, dims, acts, np.ascontiguousarray(gout, dtype=np.float64))


NUMPY_KERNELS = {
    "dense_forward": _np_dense_forward,
    "dense_backward": _np_dense_backward,
    "pd_rollout": _np_pd_rollout,
}
NUMBA_KERNELS = {
    "dense_forward": _nb_forward_wrapper,
    "dense_backward": _nb_backward_wrapper,
    "pd_rollout": _nb_pd_rollout_wrapper,
}

_active = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS
BACKEND = "numba" if USE_NUMBA else "numpy"

dense_forward = _active["dense_forward"]
dense_backward = _active["dense_backward"]
pd_rollout = _active["pd_rollout"]
