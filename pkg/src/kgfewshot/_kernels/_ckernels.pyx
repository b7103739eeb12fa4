# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()


cdef inline double _sig(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def gated_forward(double[:, ::1] a, double[:, ::1] h, double[:, ::1] ub,
                  double[:, ::1] wza, double[:, ::1] wzh, double[:, ::1] bz,
                  double[:, ::1] wra, double[:, ::1] wrh, double[:, ::1] br,
                  double[:, ::1] wua, double[:, ::1] wuh):
    cdef Py_ssize_t n = a.shape[0], f = a.shape[1], fo = wza.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double sz, sr, su
    z_arr = np.empty((n, fo))
    r_arr = np.empty((n, fo))
    u_arr = np.empty((n, fo))
    h_arr = np.empty((n, fo))
    rh_arr = np.empty((n, fo))
    cdef double[:, ::1] z = z_arr, r = r_arr, u = u_arr, hn = h_arr, rh = rh_arr
    with nogil:
        for i in range(n):
            for j in range(fo):
                sz = bz[0, j]
                sr = br[0, j]
                for k in range(f):
                    sz = sz + a[i, k] * wza[k, j] + h[i, k] * wzh[k, j]
                    sr = sr + a[i, k] * wra[k, j] + h[i, k] * wrh[k, j]
                z[i, j] = _sig(sz)
                r[i, j] = _sig(sr)
                rh[i, j] = r[i, j] * h[i, j]
            for j in range(fo):
                su = ub[0, j]
                for k in range(f):
                    su = su + a[i, k] * wua[k, j] + rh[i, k] * wuh[k, j]
                u[i, j] = tanh(su)
                hn[i, j] = (1.0 - z[i, j]) * h[i, j] + z[i, j] * u[i, j]
    return h_arr, z_arr, r_arr, u_arr


def gated_backward(double[:, ::1] g, double[:, ::1] a, double[:, ::1] h,
                   double[:, ::1] z, double[:, ::1] r, double[:, ::1] u,
                   double[:, ::1] wza, double[:, ::1] wzh, double[:, ::1] wra,
                   double[:, ::1] wrh, double[:, ::1] wua, double[:, ::1] wuh):
    cdef Py_ssize_t n = a.shape[0], f = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double acc
    pz_a = np.empty((n, f)); pr_a = np.empty((n, f)); pu_a = np.empty((n, f))
    da_a = np.zeros((n, f)); dh_a = np.empty((n, f))
    dub_a = np.zeros((1, f))
    dwza_a = np.zeros((f, f)); dwzh_a = np.zeros((f, f)); dbz_a = np.zeros((1, f))
    dwra_a = np.zeros((f, f)); dwrh_a = np.zeros((f, f)); dbr_a = np.zeros((1, f))
    dwua_a = np.zeros((f, f)); dwuh_a = np.zeros((f, f))
    cdef double[:, ::1] pz = pz_a, pr = pr_a, pu = pu_a, da = da_a, dh = dh_a
    cdef double[:, ::1] dub = dub_a, dwza = dwza_a, dwzh = dwzh_a, dbz = dbz_a
    cdef double[:, ::1] dwra = dwra_a, dwrh = dwrh_a, dbr = dbr_a
    cdef double[:, ::1] dwua = dwua_a, dwuh = dwuh_a
    with nogil:
        for i in range(n):
            for j in range(f):
                pz[i, j] = g[i, j] * (u[i, j] - h[i, j]) * z[i, j] * (1.0 - z[i, j])
                pu[i, j] = g[i, j] * z[i, j] * (1.0 - u[i, j] * u[i, j])
                dh[i, j] = g[i, j] * (1.0 - z[i, j])
            for k in range(f):
                # k indexes the r*h input of the candidate transform
                acc = 0.0
                for j in range(f):
                    acc = acc + pu[i, j] * wuh[k, j]
                dh[i, k] = dh[i, k] + acc * r[i, k]
                pr[i, k] = acc * h[i, k] * r[i, k] * (1.0 - r[i, k])
            for k in range(f):
                acc = 0.0
                for j in range(f):
                    acc = acc + pz[i, j] * wza[k, j] + pr[i, j] * wra[k, j] + pu[i, j] * wua[k, j]
                da[i, k] = acc
                acc = 0.0
                for j in range(f):
                    acc = acc + pz[i, j] * wzh[k, j] + pr[i, j] * wrh[k, j]
                dh[i, k] = dh[i, k] + acc
            for j in range(f):
                dub[0, j] += pu[i, j]
                dbz[0, j] += pz[i, j]
                dbr[0, j] += pr[i, j]
                for k in range(f):
                    dwza[k, j] += a[i, k] * pz[i, j]
                    dwzh[k, j] += h[i, k] * pz[i, j]
                    dwra[k, j] += a[i, k] * pr[i, j]
                    dwrh[k, j] += h[i, k] * pr[i, j]
                    dwua[k, j] += a[i, k] * pu[i, j]
                    dwuh[k, j] += r[i, k] * h[i, k] * pu[i, j]
    return (da_a, dh_a, dub_a, dwza_a, dwzh_a, dbz_a, dwra_a, dwrh_a, dbr_a,
            dwua_a, dwuh_a)


def ap_columns(double[:, ::1] scores, double[:, ::1] truths):
    cdef Py_ssize_t n = scores.shape[0], m = scores.shape[1]
    cdef Py_ssize_t i, j, idx
    cdef double hits, total
    cdef long npos
    out_a = np.full(m, np.nan)
    cdef double[::1] out = out_a
    cdef cnp.intp_t[::1] order
    for j in range(m):
        order = np.argsort(-np.asarray(scores[:, j]), kind="stable")
        hits = 0.0
        total = 0.0
        npos = 0
        for i in range(n):
            idx = order[i]
            if truths[idx, j] > 0:
                hits += 1.0
                npos += 1
                total += hits / (i + 1)
        if npos > 0:
            out[j] = total / npos
    return out_a
