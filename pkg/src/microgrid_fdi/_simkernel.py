"""Numba kernel for the coupled plant + runtime-filter integration.

Each step h advances

* the nonlinear plant (DG units, power lines including the two-segment
  short-circuit replacement, and a fault-free shadow copy of every line)
  with classic RK4, and
* the LTI diagnosis filters (actuator estimator, pre-filters 1/2, open-loop
  line-current estimators) with an exact matrix-exponential step and
  first-order-hold inputs taken from the plant state before/after the step.

Exact filter propagation matters: the synthesized filters cancel large
internal terms to produce small outputs, and with fast pole scales an RK4
approximation of exp(A h) leaks the cancellation. It also makes the filter
sample-to-sample map agree with the parity machinery's ZOH discretization
to machine precision.

Process noise is held over each integration step; measurement and line
noise are held over each sampling period. All noise is pre-drawn by the
caller so runs are bit-reproducible.
"""

import numpy as np
from numba import njit

# fault profile codes
FAULT_NONE = 0
FAULT_STEP = 1
FAULT_INCIPIENT = 2
FAULT_SHORT_CIRCUIT = 3

# kernel exit codes
OK = 0
ERR_COLLAPSE = 1
ERR_NONFINITE = 2


@njit(cache=True, nogil=True)
def _fault_value(kind, onset, p1, p2, t):
    if kind == FAULT_STEP:
        if t >= onset:
            return p1
        return 0.0
    if kind == FAULT_INCIPIENT:
        if t >= onset:
            return p2 * (1.0 - np.exp(-p1 * (t - onset)))
        return 0.0
    return 0.0


@njit(cache=True, nogil=True)
def _plant_deriv(t, s, ds, n, m,
                 Rt, Lt, Ct, K, Vref, Binc, Rl, Ll,
                 Pnow, delta_now, eps_now,
                 fa_type, fa_onset, fa_p1, fa_p2,
                 fl_type, fl_onset, fl_p1, fl_p2, fl_p3, fl_p4, fl_p5):
    iV = 0
    iIt = n
    iv = 2 * n
    iL = 3 * n
    iTil = 3 * n + m
    iSh = 3 * n + 2 * m

    for k in range(m):
        drive = 0.0
        for j in range(n):
            drive += Binc[j, k] * s[iV + j]
        ds[iSh + k] = (-Rl[k] * s[iSh + k] + drive) / Ll[k]
        if fl_type[k] == FAULT_SHORT_CIRCUIT and t >= fl_onset[k]:
            ipos = -1
            ineg = -1
            for j in range(n):
                if Binc[j, k] > 0.0:
                    ipos = j
                elif Binc[j, k] < 0.0:
                    ineg = j
            vf = (s[iL + k] - s[iTil + k]) * fl_p1[k]
            ds[iL + k] = (-fl_p2[k] * s[iL + k] + s[iV + ipos] - vf) / fl_p4[k]
            ds[iTil + k] = (-fl_p3[k] * s[iTil + k] + vf - s[iV + ineg]) / fl_p5[k]
        else:
            fl = _fault_value(fl_type[k], fl_onset[k], fl_p1[k], fl_p2[k], t)
            ds[iL + k] = (-Rl[k] * s[iL + k] + drive) / Ll[k] + fl
            ds[iTil + k] = 0.0

    for i in range(n):
        V = s[iV + i]
        It = s[iIt + i]
        vi = s[iv + i]
        u = K[i, 0] * V + K[i, 1] * It + K[i, 2] * vi
        fa = _fault_value(fa_type[i], fa_onset[i], fa_p1[i], fa_p2[i], t)
        inj = 0.0
        for k in range(m):
            sc = fl_type[k] == FAULT_SHORT_CIRCUIT and t >= fl_onset[k]
            if Binc[i, k] > 0.0:
                inj += Binc[i, k] * (s[iL + k] + eps_now[k])
            elif Binc[i, k] < 0.0:
                end_cur = s[iTil + k] if sc else s[iL + k]
                inj += Binc[i, k] * (end_cur + eps_now[k])
        ds[iV + i] = (It - Pnow[i] / V - inj) / Ct[i] + delta_now[i, 0]
        ds[iIt + i] = (-V - Rt[i] * It + u + fa) / Lt[i] + delta_now[i, 1]
        ds[iv + i] = Vref[i] - V + delta_now[i, 2]


@njit(cache=True, nogil=True)
def run_kernel(s, za, zr1, zr2, ihat, nsteps, ratio, h,
               Rt, Lt, Ct, K, Vref, Binc, Rl, Ll,
               load_t, load_v, load_n,
               fa_type, fa_onset, fa_p1, fa_p2,
               fl_type, fl_onset, fl_p1, fl_p2, fl_p3, fl_p4, fl_p5,
               delta, zeta, epsl,
               Ead, F0a, F1a, F0r, F1r, F0g, F1g,
               ead_l, f0_l, f1_l, with_filters, v_min,
               X, Y, U, P, FA, IPOS, INEG, ISH, FLEQ, FHATA, R1, R2, IHAT):
    n = Rt.shape[0]
    m = Rl.shape[0]
    nf = Ead.shape[0]
    nplant = 3 * n + 3 * m
    iV = 0
    iIt = n
    iv = 2 * n
    iL = 3 * n
    iTil = 3 * n + m

    ds1 = np.empty(nplant)
    ds2 = np.empty(nplant)
    ds3 = np.empty(nplant)
    ds4 = np.empty(nplant)
    stage = np.empty(nplant)
    Pnow = np.empty(n)
    ym_pre = np.empty((n, 4))
    ym_post = np.empty((n, 4))
    drive_pre = np.empty(m)
    drive_post = np.empty(m)
    agg_pre = np.empty(n)
    agg_post = np.empty(n)
    znew = np.empty(nf)
    sc_init = np.zeros(m, dtype=np.int64)

    isamp = 0
    for istep in range(nsteps + 1):
        t = istep * h
        for i in range(n):
            val = load_v[i, 0]
            for q in range(load_n[i]):
                if t >= load_t[i, q] - 1e-15:
                    val = load_v[i, q]
            Pnow[i] = val
        for k in range(m):
            if fl_type[k] == FAULT_SHORT_CIRCUIT and sc_init[k] == 0 and t >= fl_onset[k]:
                s[iTil + k] = s[iL + k]
                sc_init[k] = 1

        # signed guard: catches both the near-zero CPL division and a dive
        # through zero inside one sampling period
        for i in range(n):
            if s[iV + i] < v_min:
                return ERR_COLLAPSE, istep // ratio, i

        if istep % ratio == 0:
            isamp = istep // ratio
            ok = True
            for q in range(nplant):
                if not np.isfinite(s[q]):
                    ok = False
            if not ok:
                return ERR_NONFINITE, isamp, -1
            for i in range(n):
                X[isamp, i, 0] = s[iV + i]
                X[isamp, i, 1] = s[iIt + i]
                X[isamp, i, 2] = s[iv + i]
                Y[isamp, i, 0] = s[iV + i] + zeta[isamp, i, 0]
                Y[isamp, i, 1] = s[iIt + i] + zeta[isamp, i, 1]
                Y[isamp, i, 2] = s[iv + i] + zeta[isamp, i, 2]
                U[isamp, i] = (K[i, 0] * s[iV + i] + K[i, 1] * s[iIt + i]
                               + K[i, 2] * s[iv + i])
                P[isamp, i] = Pnow[i]
                FA[isamp, i] = _fault_value(fa_type[i], fa_onset[i], fa_p1[i], fa_p2[i], t)
                FHATA[isamp, i] = za[i, nf - 1]
                R1[isamp, i] = zr1[i, nf - 1]
                R2[isamp, i] = zr2[i, nf - 1]
            for k in range(m):
                sc = fl_type[k] == FAULT_SHORT_CIRCUIT and t >= fl_onset[k]
                IPOS[isamp, k] = s[iL + k]
                INEG[isamp, k] = s[iTil + k] if sc else s[iL + k]
                ISH[isamp, k] = s[3 * n + 2 * m + k]
                IHAT[isamp, k] = ihat[k]
                if sc:
                    ipos = -1
                    ineg = -1
                    for j in range(n):
                        if Binc[j, k] > 0.0:
                            ipos = j
                        elif Binc[j, k] < 0.0:
                            ineg = j
                    vf = (s[iL + k] - s[iTil + k]) * fl_p1[k]
                    FLEQ[isamp, k] = ((Rl[k] / Ll[k] - fl_p2[k] / fl_p4[k]) * s[iL + k]
                                      + (1.0 / fl_p4[k] - 1.0 / Ll[k]) * s[iV + ipos]
                                      + s[iV + ineg] / Ll[k] - vf / fl_p4[k])
                else:
                    FLEQ[isamp, k] = _fault_value(fl_type[k], fl_onset[k], fl_p1[k],
                                                  fl_p2[k], t)
            if istep == nsteps:
                return OK, isamp, -1

        # plant RK4 step with held noises
        _plant_deriv(t, s, ds1, n, m, Rt, Lt, Ct, K, Vref, Binc, Rl, Ll,
                     Pnow, delta[istep], epsl[isamp],
                     fa_type, fa_onset, fa_p1, fa_p2,
                     fl_type, fl_onset, fl_p1, fl_p2, fl_p3, fl_p4, fl_p5)
        for q in range(nplant):
            stage[q] = s[q] + 0.5 * h * ds1[q]
        _plant_deriv(t + 0.5 * h, stage, ds2, n, m, Rt, Lt, Ct, K, Vref, Binc, Rl, Ll,
                     Pnow, delta[istep], epsl[isamp],
                     fa_type, fa_onset, fa_p1, fa_p2,
                     fl_type, fl_onset, fl_p1, fl_p2, fl_p3, fl_p4, fl_p5)
        for q in range(nplant):
            stage[q] = s[q] + 0.5 * h * ds2[q]
        _plant_deriv(t + 0.5 * h, stage, ds3, n, m, Rt, Lt, Ct, K, Vref, Binc, Rl, Ll,
                     Pnow, delta[istep], epsl[isamp],
                     fa_type, fa_onset, fa_p1, fa_p2,
                     fl_type, fl_onset, fl_p1, fl_p2, fl_p3, fl_p4, fl_p5)
        for q in range(nplant):
            stage[q] = s[q] + h * ds3[q]
        _plant_deriv(t + h, stage, ds4, n, m, Rt, Lt, Ct, K, Vref, Binc, Rl, Ll,
                     Pnow, delta[istep], epsl[isamp],
                     fa_type, fa_onset, fa_p1, fa_p2,
                     fl_type, fl_onset, fl_p1, fl_p2, fl_p3, fl_p4, fl_p5)
        if with_filters:
            # capture pre-update inputs (same held measurement noise)
            for i in range(n):
                ym_pre[i, 0] = s[iV + i] + zeta[isamp, i, 0]
                ym_pre[i, 1] = s[iIt + i] + zeta[isamp, i, 1]
                ym_pre[i, 2] = s[iv + i] + zeta[isamp, i, 2]
                ym_pre[i, 3] = Vref[i]
            for k in range(m):
                dv = 0.0
                for j in range(n):
                    dv += Binc[j, k] * ym_pre[j, 0]
                drive_pre[k] = dv
            for i in range(n):
                acc = 0.0
                for k in range(m):
                    acc += Binc[i, k] * ihat[k]
                agg_pre[i] = acc

        # advance the plant
        for q in range(nplant):
            s[q] += (h / 6.0) * (ds1[q] + 2.0 * ds2[q] + 2.0 * ds3[q] + ds4[q])

        if with_filters:
            for i in range(n):
                ym_post[i, 0] = s[iV + i] + zeta[isamp, i, 0]
                ym_post[i, 1] = s[iIt + i] + zeta[isamp, i, 1]
                ym_post[i, 2] = s[iv + i] + zeta[isamp, i, 2]
                ym_post[i, 3] = Vref[i]
            for k in range(m):
                dv = 0.0
                for j in range(n):
                    dv += Binc[j, k] * ym_post[j, 0]
                drive_post[k] = dv
                ihat[k] = ead_l[k] * ihat[k] + f0_l[k] * drive_pre[k] + f1_l[k] * drive_post[k]
            for i in range(n):
                acc = 0.0
                for k in range(m):
                    acc += Binc[i, k] * ihat[k]
                agg_post[i] = acc
            for i in range(n):
                for a in range(nf):
                    acc = 0.0
                    for b in range(nf):
                        acc += Ead[a, b] * za[i, b]
                    for c in range(4):
                        acc += F0a[i, a, c] * ym_pre[i, c] + F1a[i, a, c] * ym_post[i, c]
                    znew[a] = acc
                for a in range(nf):
                    za[i, a] = znew[a]
                for a in range(nf):
                    acc = 0.0
                    for b in range(nf):
                        acc += Ead[a, b] * zr1[i, b]
                    for c in range(4):
                        acc += F0r[i, a, c] * ym_pre[i, c] + F1r[i, a, c] * ym_post[i, c]
                    znew[a] = acc
                for a in range(nf):
                    zr1[i, a] = znew[a]
                for a in range(nf):
                    acc = 0.0
                    for b in range(nf):
                        acc += Ead[a, b] * zr2[i, b]
                    acc += F0g[i, a] * agg_pre[i] + F1g[i, a] * agg_post[i]
                    znew[a] = acc
                for a in range(nf):
                    zr2[i, a] = znew[a]

    return OK, isamp, -1
