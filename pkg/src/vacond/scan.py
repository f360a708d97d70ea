"""Fused whole-sequence recurrences with hand-written backpropagation through time.

Two autodiff ops cover every model variant:

* :func:`affine_scan`: gate pre-activations ``fx = ax * (Wx x_t) + sx`` and
  ``fh = ah * (Wh h_{t-1}) + sh`` with per-sequence ``ax, sx, ah, sh``.
  Concatenation, FiLM, generated static weights and the plain backbone are
  all special cases.
* :func:`dynamic_scan`: the same cell, with ``ax, ah`` produced at every step
  by a small recurrent hypernetwork and four MLP heads.

The kernels compute in float64. The backward pass recomputes each step from
the stored hidden states instead of caching activations.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from numba.typed import List

from . import autodiff as ad
from .autodiff import Tensor

KIND_CODE = {"vanilla": 0, "gru": 1, "lstm": 2}


# ---------------------------------------------------------------- gate arithmetic


# libm tanh is ~4x slower than these exp-based forms, which stay within a few ulp


@njit(cache=True)
def _tanh(v):
    a = abs(v)
    if a < 0.0625:
        e = math.expm1(-2.0 * a)
        return math.copysign(-e / (2.0 + e), v)
    e = math.exp(-2.0 * a)
    return math.copysign((1.0 - e) / (1.0 + e), v)


@njit(cache=True)
def _sig(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


@njit(cache=True)
def _gates(kind, fx, fh, h, c, hn, cn):
    """Batched cell update; fx, fh are [B, gates*H]."""
    B, H = h.shape
    for b in range(B):
        if kind == 0:
            for j in range(H):
                hn[b, j] = _tanh(fx[b, j] + fh[b, j])
        elif kind == 1:
            for j in range(H):
                r = _sig(fx[b, j] + fh[b, j])
                z = _sig(fx[b, H + j] + fh[b, H + j])
                n = _tanh(fx[b, 2 * H + j] + r * fh[b, 2 * H + j])
                hn[b, j] = n + z * (h[b, j] - n)
        else:
            for j in range(H):
                i = _sig(fx[b, j] + fh[b, j])
                f = _sig(fx[b, H + j] + fh[b, H + j])
                g = _tanh(fx[b, 2 * H + j] + fh[b, 2 * H + j])
                o = _sig(fx[b, 3 * H + j] + fh[b, 3 * H + j])
                cn[b, j] = f * c[b, j] + i * g
                hn[b, j] = o * _tanh(cn[b, j])


@njit(cache=True)
def _gates_backward(kind, fx, fh, h, c, dh, dc, dfx, dfh, dh_prev, dc_prev):
    """Given dL/dh_new (and dL/dc_new), fill pre-activation grads and the direct state grads.

    For GRU/LSTM fx and fh share gradients except for the GRU candidate rows.
    """
    B, H = h.shape
    for b in range(B):
        if kind == 0:
            for j in range(H):
                hn = _tanh(fx[b, j] + fh[b, j])
                g = dh[b, j] * (1.0 - hn * hn)
                dfx[b, j] = g
                dfh[b, j] = g
                dh_prev[b, j] = 0.0
        elif kind == 1:
            for j in range(H):
                r = _sig(fx[b, j] + fh[b, j])
                z = _sig(fx[b, H + j] + fh[b, H + j])
                gn = fh[b, 2 * H + j]
                n = _tanh(fx[b, 2 * H + j] + r * gn)
                d = dh[b, j]
                dn = d * (1.0 - z) * (1.0 - n * n)
                dz = d * (h[b, j] - n) * z * (1.0 - z)
                dr = dn * gn * r * (1.0 - r)
                dfx[b, j] = dr
                dfh[b, j] = dr
                dfx[b, H + j] = dz
                dfh[b, H + j] = dz
                dfx[b, 2 * H + j] = dn
                dfh[b, 2 * H + j] = dn * r
                dh_prev[b, j] = d * z
        else:
            for j in range(H):
                i = _sig(fx[b, j] + fh[b, j])
                f = _sig(fx[b, H + j] + fh[b, H + j])
                g = _tanh(fx[b, 2 * H + j] + fh[b, 2 * H + j])
                o = _sig(fx[b, 3 * H + j] + fh[b, 3 * H + j])
                cn = f * c[b, j] + i * g
                tc = _tanh(cn)
                dcn = dc[b, j] + dh[b, j] * o * (1.0 - tc * tc)
                di = dcn * g * i * (1.0 - i)
                df = dcn * c[b, j] * f * (1.0 - f)
                dg = dcn * i * (1.0 - g * g)
                do = dh[b, j] * tc * o * (1.0 - o)
                dfx[b, j] = di
                dfx[b, H + j] = df
                dfx[b, 2 * H + j] = dg
                dfx[b, 3 * H + j] = do
                dfh[b, j] = di
                dfh[b, H + j] = df
                dfh[b, 2 * H + j] = dg
                dfh[b, 3 * H + j] = do
                dh_prev[b, j] = 0.0
                dc_prev[b, j] = dcn * f


@njit(cache=True)
def _apply(W, v, out):
    """out[b] = W[b or 0] @ v[b]."""
    if W.shape[0] == 1:
        out[:, :] = np.dot(v, W[0].T)
    else:
        for b in range(v.shape[0]):
            out[b, :] = np.dot(W[b], v[b])


@njit(cache=True)
def _project_inputs(Wx, X):
    """U[b, t] = Wx[b or 0] @ X[b, t] for every step at once."""
    B, T, D = X.shape
    rows = Wx.shape[1]
    U = np.empty((B, T, rows))
    for b in range(B):
        U[b] = np.dot(np.ascontiguousarray(X[b]), Wx[b if Wx.shape[0] > 1 else 0].T)
    return U


@njit(cache=True)
def _modulate(u, a, s, out):
    B, R = out.shape
    for b in range(B):
        for r in range(R):
            out[b, r] = a[b, r] * u[b, r] + s[b, r]


@njit(cache=True)
def _apply_backward(W, v, g, dW, dv):
    """Accumulate dW and write dv for out = W v, given g = dL/dout."""
    if W.shape[0] == 1:
        dW[0] += np.dot(g.T, v)
        dv[:, :] = np.dot(g, W[0])
    else:
        for b in range(v.shape[0]):
            dW[b] += np.outer(g[b], v[b])
            dv[b, :] = np.dot(g[b], W[b])


# ---------------------------------------------------------------- affine scan


@njit(cache=True)
def _affine_forward(kind, X, Wx, ax, sx, Wh, ah, sh, h0, c0, Hs, Cs):
    B, T, D = X.shape
    rows = Wh.shape[1]
    h = h0.copy()
    c = c0.copy()
    hn = np.empty_like(h)
    cn = np.zeros_like(c)
    fx = np.empty((B, rows))
    fh = np.empty((B, rows))
    uh = np.empty((B, rows))
    U = _project_inputs(Wx, X)
    for t in range(T):
        _apply(Wh, h, uh)
        _modulate(U[:, t, :], ax, sx, fx)
        _modulate(uh, ah, sh, fh)
        _gates(kind, fx, fh, h, c, hn, cn)
        h[:, :] = hn
        c[:, :] = cn
        Hs[:, t, :] = h
        Cs[:, t, :] = c


@njit(cache=True)
def _affine_backward(kind, X, Wx, ax, sx, Wh, ah, sh, h0, c0, Hs, Cs, gH, gC,
                     dX, dWx, dax, dsx, dWh, dah, dsh, dh0, dc0):
    B, T, D = X.shape
    rows = Wh.shape[1]
    H = h0.shape[1]
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    uh = np.empty((B, rows))
    fx = np.empty((B, rows))
    fh = np.empty((B, rows))
    dfx = np.empty((B, rows))
    dfh = np.empty((B, rows))
    dh_prev = np.empty((B, H))
    dc_prev = np.zeros((B, H))
    dv = np.empty((B, H))
    dxt = np.empty((B, D))
    U = _project_inputs(Wx, X)
    for t in range(T - 1, -1, -1):
        hp = h0 if t == 0 else np.ascontiguousarray(Hs[:, t - 1, :])
        cp = c0 if t == 0 else np.ascontiguousarray(Cs[:, t - 1, :])
        xt = np.ascontiguousarray(X[:, t, :])
        ux = U[:, t, :]
        _apply(Wh, hp, uh)
        _modulate(ux, ax, sx, fx)
        _modulate(uh, ah, sh, fh)
        dh += gH[:, t, :]
        dc += gC[:, t, :]
        _gates_backward(kind, fx, fh, hp, cp, dh, dc, dfx, dfh, dh_prev, dc_prev)
        dax += dfx * ux
        dsx += dfx
        _apply_backward(Wx, xt, dfx * ax, dWx, dxt)
        dX[:, t, :] = dxt
        dah += dfh * uh
        dsh += dfh
        _apply_backward(Wh, hp, dfh * ah, dWh, dv)
        dh[:, :] = dh_prev + dv
        dc[:, :] = dc_prev
    dh0[:, :] = dh
    dc0[:, :] = dc


def _np(t) -> np.ndarray:
    return np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)


def _out_grad(g: np.ndarray, like: Tensor):
    return g.astype(like.data.dtype, copy=False)


def affine_scan(kind: str, X: Tensor, Wx: Tensor, ax: Tensor, sx: Tensor, Wh: Tensor, ah: Tensor, sh: Tensor,
                h0: Tensor, c0: Tensor):
    """Run the recurrence over X [B, T, D]; returns (hidden states [B, T, H], cell states [B, T, H]).

    Wx [1 or B, rows, D], Wh [1 or B, rows, H]; ax, sx, ah, sh [B, rows]; h0, c0 [B, H].
    Cell states are zero for non-LSTM cells.
    """
    code = KIND_CODE[kind]
    inputs = (X, Wx, ax, sx, Wh, ah, sh, h0, c0)
    arrs = [_np(t) for t in inputs]
    B, T, _ = arrs[0].shape
    H = arrs[7].shape[1]
    if arrs[4].shape[2] != H or arrs[2].shape != (B, arrs[4].shape[1]):
        raise ad.ShapeError("affine_scan: inconsistent recurrent shapes")
    Hs = np.empty((B, T, H))
    Cs = np.empty((B, T, H))
    _affine_forward(code, *arrs, Hs, Cs)
    dtype = X.data.dtype
    packed = np.concatenate([Hs, Cs], axis=2).astype(dtype)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        grads = [np.zeros_like(a) for a in arrs]
        _affine_backward(code, *arrs, Hs, Cs, np.ascontiguousarray(g[:, :, :H]),
                         np.ascontiguousarray(g[:, :, H:]), *grads)
        return [_out_grad(gr, t) for gr, t in zip(grads, inputs)]

    out = ad.custom(list(inputs), packed, vjp)
    return out[:, :, :H], out[:, :, H:]


# ---------------------------------------------------------------- dynamic scan


@njit(cache=True)
def _mlp_forward(ws, bs, v, slope):
    """Returns (output, layer inputs, layer pre-activations)."""
    n = len(ws)
    ins = [v]
    pres = [v]
    for i in range(n):
        if i > 0:
            ins.append(v)
        pre = np.dot(v, ws[i].T) + bs[i]
        if i == 0:
            pres[0] = pre
        else:
            pres.append(pre)
        if i < n - 1:
            v = np.where(pre > 0, pre, slope * pre)
        else:
            v = pre
    return v, ins, pres


@njit(cache=True)
def _mlp_backward(ws, ins, pres, g, slope, gws, gbs):
    for i in range(len(ws) - 1, -1, -1):
        if i < len(ws) - 1:
            g = np.where(pres[i] > 0, g, slope * g)
        gws[i] += np.dot(g.T, ins[i])
        gbs[i] += g.sum(axis=0)
        g = np.dot(g, ws[i])
    return g


@njit(cache=True)
def _dynamic_step(kind, xt, h, c, hp, cp, phi, Wx, bx, Wh, bh, PWx, pbx, PWh, pbh,
                  fhw, fhb, fxw, fxb, dhw, dhb, dxw, dxb, slope):
    """One step of both recurrences plus everything the backward pass needs."""
    pin = np.concatenate((h, phi), axis=1)
    pfx = np.dot(pin, PWx.T) + pbx
    pfh = np.dot(hp, PWh.T) + pbh
    hp_n = np.empty_like(hp)
    cp_n = np.zeros_like(cp)
    _gates(kind, pfx, pfh, hp, cp, hp_n, cp_n)
    z_h, fh_in, fh_pre = _mlp_forward(fhw, fhb, hp_n, slope)
    d_h, dh_in, dh_pre = _mlp_forward(dhw, dhb, z_h, slope)
    z_x, fx_in, fx_pre = _mlp_forward(fxw, fxb, hp_n, slope)
    d_x, dx_in, dx_pre = _mlp_forward(dxw, dxb, z_x, slope)
    ux = np.dot(xt, Wx.T)
    uh = np.dot(h, Wh.T)
    fx = d_x * ux + bx
    fh = d_h * uh + bh
    h_n = np.empty_like(h)
    c_n = np.zeros_like(c)
    _gates(kind, fx, fh, h, c, h_n, c_n)
    acts = (fh_in, fh_pre, dh_in, dh_pre, fx_in, fx_pre, dx_in, dx_pre)
    return (h_n, c_n, hp_n, cp_n), (pin, pfx, pfh, ux, uh, fx, fh, d_h, d_x), acts


@njit(cache=True)
def _dynamic_forward(kind, X, phi, Wx, bx, Wh, bh, PWx, pbx, PWh, pbh,
                     fhw, fhb, fxw, fxb, dhw, dhb, dxw, dxb, slope, h0, c0, hp0, cp0,
                     Hs, Cs, HPs, CPs):
    B, T, D = X.shape
    h, c, hp, cp = h0.copy(), c0.copy(), hp0.copy(), cp0.copy()
    for t in range(T):
        new, _, _ = _dynamic_step(kind, np.ascontiguousarray(X[:, t, :]), h, c, hp, cp, phi, Wx, bx, Wh, bh,
                                  PWx, pbx, PWh, pbh, fhw, fhb, fxw, fxb, dhw, dhb, dxw, dxb, slope)
        h, c, hp, cp = new
        Hs[:, t, :] = h
        Cs[:, t, :] = c
        HPs[:, t, :] = hp
        CPs[:, t, :] = cp


@njit(cache=True)
def _dynamic_backward(kind, X, phi, Wx, bx, Wh, bh, PWx, pbx, PWh, pbh,
                      fhw, fhb, fxw, fxb, dhw, dhb, dxw, dxb, slope, h0, c0, hp0, cp0,
                      Hs, Cs, HPs, CPs, gH, gC, gHP, gCP,
                      dX, dphi, dWx, dbx, dWh, dbh, dPWx, dpbx, dPWh, dpbh,
                      gfhw, gfhb, gfxw, gfxb, gdhw, gdhb, gdxw, gdxb, dh0, dc0, dhp0, dcp0):
    B, T, D = X.shape
    H = h0.shape[1]
    P = hp0.shape[1]
    rows = Wh.shape[0]
    prow = PWh.shape[0]
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    dhp = np.zeros((B, P))
    dcp = np.zeros((B, P))
    dfx = np.empty((B, rows))
    dfh = np.empty((B, rows))
    dpfx = np.empty((B, prow))
    dpfh = np.empty((B, prow))
    dh_prev = np.empty((B, H))
    dc_prev = np.zeros((B, H))
    dhp_prev = np.empty((B, P))
    dcp_prev = np.zeros((B, P))
    for t in range(T - 1, -1, -1):
        h = h0 if t == 0 else np.ascontiguousarray(Hs[:, t - 1, :])
        c = c0 if t == 0 else np.ascontiguousarray(Cs[:, t - 1, :])
        hp = hp0 if t == 0 else np.ascontiguousarray(HPs[:, t - 1, :])
        cp = cp0 if t == 0 else np.ascontiguousarray(CPs[:, t - 1, :])
        xt = np.ascontiguousarray(X[:, t, :])
        _, inter, acts = _dynamic_step(kind, xt, h, c, hp, cp, phi, Wx, bx, Wh, bh, PWx, pbx, PWh, pbh,
                                       fhw, fhb, fxw, fxb, dhw, dhb, dxw, dxb, slope)
        pin, pfx, pfh, ux, uh, fx, fh, d_h, d_x = inter
        fh_in, fh_pre, dh_in, dh_pre, fx_in, fx_pre, dx_in, dx_pre = acts
        dh += gH[:, t, :]
        dc += gC[:, t, :]
        dhp += gHP[:, t, :]
        dcp += gCP[:, t, :]
        # main cell
        _gates_backward(kind, fx, fh, h, c, dh, dc, dfx, dfh, dh_prev, dc_prev)
        dbx += dfx.sum(axis=0)
        dbh += dfh.sum(axis=0)
        gx = dfx * d_x
        gh = dfh * d_h
        dWx += np.dot(gx.T, xt)
        dX[:, t, :] = np.dot(gx, Wx)
        dWh += np.dot(gh.T, h)
        dh_prev += np.dot(gh, Wh)
        # modulation heads back to the hyper state
        g_zx = _mlp_backward(dxw, dx_in, dx_pre, dfx * ux, slope, gdxw, gdxb)
        dhp += _mlp_backward(fxw, fx_in, fx_pre, g_zx, slope, gfxw, gfxb)
        g_zh = _mlp_backward(dhw, dh_in, dh_pre, dfh * uh, slope, gdhw, gdhb)
        dhp += _mlp_backward(fhw, fh_in, fh_pre, g_zh, slope, gfhw, gfhb)
        # hyper cell
        _gates_backward(kind, pfx, pfh, hp, cp, dhp, dcp, dpfx, dpfh, dhp_prev, dcp_prev)
        dpbx += dpfx.sum(axis=0)
        dpbh += dpfh.sum(axis=0)
        dPWx += np.dot(dpfx.T, pin)
        dpin = np.dot(dpfx, PWx)
        dh_prev += dpin[:, :H]
        dphi += dpin[:, H:]
        dPWh += np.dot(dpfh.T, hp)
        dhp_prev += np.dot(dpfh, PWh)
        dh[:, :] = dh_prev
        dc[:, :] = dc_prev
        dhp[:, :] = dhp_prev
        dcp[:, :] = dcp_prev
    dh0[:, :] = dh
    dc0[:, :] = dc
    dhp0[:, :] = dhp
    dcp0[:, :] = dcp


def _typed(arrs):
    lst = List()
    for a in arrs:
        lst.append(a)
    return lst


def dynamic_scan(kind: str, X: Tensor, phi: Tensor, cell: dict, hyper: dict, heads: dict, slope: float,
                 h0: Tensor, c0: Tensor, hp0: Tensor, cp0: Tensor):
    """Dynamic-hypernetwork recurrence over X [B, T, D].

    ``cell`` / ``hyper`` hold w_x, b_x, w_h, b_h tensors; ``heads`` maps
    f_h, f_x, d_h, d_x to (weights list, biases list). Returns
    (H [B,T,H], C [B,T,H], hyper H [B,T,P], hyper C [B,T,P]).
    """
    code = KIND_CODE[kind]
    order = ("f_h", "f_x", "d_h", "d_x")
    n = len(heads["f_h"][0])
    head_tensors = []
    for k in order:
        ws, bs = heads[k]
        head_tensors += list(ws) + list(bs)
    cell_t = [cell["w_x"], cell["b_x"], cell["w_h"], cell["b_h"]]
    hyper_t = [hyper["w_x"], hyper["b_x"], hyper["w_h"], hyper["b_h"]]
    state_t = [h0, c0, hp0, cp0]
    inputs = [X, phi] + cell_t + hyper_t + head_tensors + state_t
    arrs = [_np(t) for t in inputs]
    X_, phi_ = arrs[0], arrs[1]
    cell_a, hyper_a = arrs[2:6], arrs[6:10]
    head_a = arrs[10 : 10 + 8 * n]
    state_a = arrs[10 + 8 * n :]
    lists = []
    for i in range(4):
        chunk = head_a[2 * n * i : 2 * n * (i + 1)]
        lists += [_typed(chunk[:n]), _typed(chunk[n:])]
    B, T, _ = X_.shape
    H = state_a[0].shape[1]
    P = state_a[2].shape[1]
    outs = [np.empty((B, T, H)), np.empty((B, T, H)), np.empty((B, T, P)), np.empty((B, T, P))]
    common = (code, X_, phi_, *cell_a, *hyper_a, *lists, float(slope), *state_a)
    _dynamic_forward(*common, *outs)
    dtype = X.data.dtype
    packed = np.concatenate(outs, axis=2).astype(dtype)

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        gs = [np.ascontiguousarray(g[:, :, a:b]) for a, b in ((0, H), (H, 2 * H), (2 * H, 2 * H + P), (2 * H + P, 2 * H + 2 * P))]
        d_main = [np.zeros_like(a) for a in (X_, phi_, *cell_a, *hyper_a)]
        d_heads = [np.zeros_like(a) for a in head_a]
        d_lists = []
        for i in range(4):
            chunk = d_heads[2 * n * i : 2 * n * (i + 1)]
            d_lists += [_typed(chunk[:n]), _typed(chunk[n:])]
        d_state = [np.zeros_like(a) for a in state_a]
        _dynamic_backward(*common, *outs, *gs, *d_main, *d_lists, *d_state)
        # numba typed lists share buffers with d_heads
        grads = d_main + d_heads + d_state
        return [_out_grad(gr, t) for gr, t in zip(grads, inputs)]

    out = ad.custom(inputs, packed, vjp)
    return (out[:, :, :H], out[:, :, H : 2 * H], out[:, :, 2 * H : 2 * H + P], out[:, :, 2 * H + P :])
