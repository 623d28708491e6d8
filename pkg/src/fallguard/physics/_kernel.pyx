# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled physics kernel. Mirrors fallguard.physics._reference exactly;
see that module for the algorithm description."""

from libc.math cimport cos, sin, sqrt, fabs, hypot, isfinite

DEF MAXL = 32          # links
DEF MAXJ = 31          # joints
DEF MAXCT = 136        # contact slots


cdef inline double _clampd(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef int _cholesky_solve(double* A, double* b, int n) nogil:
    """In-place Cholesky factor + solve for SPD A (row-major n x n)."""
    cdef int i, j, k
    cdef double s
    for i in range(n):
        for j in range(i + 1):
            s = A[i * n + j]
            for k in range(j):
                s -= A[i * n + k] * A[j * n + k]
            if i == j:
                if s <= 0.0:
                    return 1
                A[i * n + i] = sqrt(s)
            else:
                A[i * n + j] = s / A[j * n + j]
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= A[i * n + k] * b[k]
        b[i] = s / A[i * n + i]
    for i in range(n - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, n):
            s -= A[k * n + i] * b[k]
        b[i] = s / A[i * n + i]
    return 0


def step_substeps(
    double[:] mass, double[:] inv_mass, double[:] inertia, double[:] inv_inertia,
    int[:] jparent, int[:] jchild, int[:] parent_joint,
    double[:, :] anchor_p, double[:, :] anchor_c,
    double[:] limit_lo, double[:] limit_hi, double[:] torque_rated,
    double[:, :, :] cand_local, int[:] cand_count, double[:] radius,
    double dt, double gravity, double mu, double restitution,
    double k_n, double c_n, double k_t, double k_lim, double c_lim,
    double qd_max, double peak,
    int obs_active, double obs_x0, double obs_x1, double obs_h,
    double[:] base, double[:] base_vel, double[:] q, double[:] qd,
    int use_pd, double[:] control, double[:] kp_eff, double[:] kd_eff,
    int n_substeps, int geometry_full, int record_events,
    double[:] out_link_force, unsigned char[:] out_link_contact,
    double[:] out_joint_reaction, double[:] out_joint_ext, double[:] out_tau_total,
    double[:] out_motor_abs, double[:] out_motor_last,
    double[:] out_grf_last, double[:] out_scalars,
    int[:] ev_link, double[:] ev_force, double[:, :] ev_normal,
    double[:, :] ev_point,
    double[:] out_joint_reaction_last, double[:] out_joint_ext_last,
    double[:] out_link_force_last,
):
    cdef int L = mass.shape[0]
    cdef int J = jparent.shape[0]
    cdef int sub, i, j, k, p, c, n_cand, nc, row, col, n_limit, n_clamped, hit
    cdef double th[MAXL]
    cdef double posx[MAXL], posz[MAXL]
    cdef double velx[MAXL], velz[MAXL]
    cdef double om[MAXL]
    cdef double fx[MAXL], fz[MAXL]
    cdef double tqv[MAXL]
    cdef double spring[MAXJ]
    cdef double t_lim[MAXJ]
    cdef double limit_damp[MAXJ]
    cdef double damping[MAXJ]
    cdef double rpx[MAXJ], rpz[MAXJ], rcx[MAXJ], rcz[MAXJ]
    cdef double awx[MAXJ], awz[MAXJ]
    cdef double G[3 * MAXJ][3 * MAXL]
    cdef double A[(3 * MAXJ) * (3 * MAXJ)]
    cdef double rhs[3 * MAXJ]
    cdef double vflat[3 * MAXL]
    cdef double invm_diag[3 * MAXL]
    cdef double lamx[MAXJ], lamz[MAXJ], uimp[MAXJ]
    cdef double reaction[MAXJ]
    cdef double tau_ext[MAXJ]
    cdef double motor[MAXJ]
    cdef double t_lim_tot[MAXJ]
    cdef double lfx[MAXL], lfz[MAXL]
    cdef double new_qd[MAXJ]
    cdef double new_q[MAXJ]
    cdef double new_base[3], new_base_vel[3]
    cdef int ct_link[MAXCT]
    cdef double ct_fx[MAXCT], ct_fz[MAXCT]
    cdef double ct_nx[MAXCT], ct_nz[MAXCT]
    cdef double ct_px[MAXCT], ct_pz[MAXCT]
    cdef double cth, sth, ex, ez, cxw, czw, r, pen, nx, nz, px, pz
    cdef double armx, armz, vpx, vpz, pen_rate, fn, tx, tz, vt, ft, Fx, Fz
    cdef double closx, closz, dx, dz, dist, e0, e1, e2
    cdef double cr_n, cr_t, m_eff_n, m_eff_t, cd, kt_c, frac
    cdef double c_n_base = c_n * (1.0 - restitution)
    cdef double cap, tqj, s, grfx, grfz, mag, fmag, rf_x, rf_z
    cdef int n3, finite

    for i in range(L):
        out_link_force[i] = 0.0
        out_link_contact[i] = 0
    for j in range(J):
        out_joint_reaction[j] = 0.0
        out_joint_ext[j] = 0.0
        out_tau_total[j] = 0.0
        out_motor_abs[j] = 0.0
        out_motor_last[j] = 0.0
    out_grf_last[0] = 0.0
    out_grf_last[1] = 0.0
    for i in range(6):
        out_scalars[i] = 0.0
    for i in range(L):
        invm_diag[3 * i] = inv_mass[i]
        invm_diag[3 * i + 1] = inv_mass[i]
        invm_diag[3 * i + 2] = inv_inertia[i]

    for sub in range(n_substeps):
        # ---- velocities at the pre-step configuration
        th[0] = base[2]
        velx[0] = base_vel[0]
        velz[0] = base_vel[1]
        om[0] = base_vel[2]
        for j in range(J):
            p = jparent[j]
            c = jchild[j]
            th[c] = th[p] + q[j]
            cth = cos(th[p]); sth = sin(th[p])
            rpx[j] = cth * anchor_p[j, 0] + sth * anchor_p[j, 1]
            rpz[j] = -sth * anchor_p[j, 0] + cth * anchor_p[j, 1]
            cth = cos(th[c]); sth = sin(th[c])
            rcx[j] = cth * anchor_c[j, 0] + sth * anchor_c[j, 1]
            rcz[j] = -sth * anchor_c[j, 0] + cth * anchor_c[j, 1]
            om[c] = om[p] + qd[j]
            velx[c] = velx[p] + om[p] * rpz[j] - om[c] * rcz[j]
            velz[c] = velz[p] - om[p] * rpx[j] + om[c] * rcx[j]

        # ---- explicit position integration, poses at the new config
        for i in range(3):
            new_base[i] = base[i] + dt * base_vel[i]
        for j in range(J):
            new_q[j] = q[j] + dt * qd[j]
        th[0] = new_base[2]
        posx[0] = new_base[0]
        posz[0] = new_base[1]
        for j in range(J):
            p = jparent[j]
            c = jchild[j]
            th[c] = th[p] + new_q[j]
            cth = cos(th[p]); sth = sin(th[p])
            rpx[j] = cth * anchor_p[j, 0] + sth * anchor_p[j, 1]
            rpz[j] = -sth * anchor_p[j, 0] + cth * anchor_p[j, 1]
            cth = cos(th[c]); sth = sin(th[c])
            rcx[j] = cth * anchor_c[j, 0] + sth * anchor_c[j, 1]
            rcz[j] = -sth * anchor_c[j, 0] + cth * anchor_c[j, 1]
            posx[c] = posx[p] + rpx[j] - rcx[j]
            posz[c] = posz[p] + rpz[j] - rcz[j]
            awx[j] = posx[p] + rpx[j]
            awz[j] = posz[p] + rpz[j]

        # ---- explicit forces
        for i in range(L):
            fx[i] = 0.0
            fz[i] = -mass[i] * gravity
            tqv[i] = 0.0
            lfx[i] = 0.0
            lfz[i] = 0.0

        for j in range(J):
            if use_pd:
                cap = torque_rated[j] * peak
                spring[j] = _clampd(
                    kp_eff[j] * (control[j] - new_q[j]), -cap, cap)
            else:
                spring[j] = control[j]

        n_limit = 0
        for j in range(J):
            t_lim[j] = 0.0
            limit_damp[j] = 0.0
            if new_q[j] > limit_hi[j]:
                t_lim[j] = -k_lim * (new_q[j] - limit_hi[j])
                limit_damp[j] = c_lim
                n_limit += 1
            elif new_q[j] < limit_lo[j]:
                t_lim[j] = k_lim * (limit_lo[j] - new_q[j])
                limit_damp[j] = c_lim
                n_limit += 1
            damping[j] = (kd_eff[j] if use_pd else 0.0) + limit_damp[j]
            tqj = spring[j] + t_lim[j]
            tqv[jchild[j]] += tqj
            tqv[jparent[j]] -= tqj

        # ---- contacts
        nc = 0
        grfx = 0.0
        grfz = 0.0
        for i in range(L):
            n_cand = cand_count[i] if geometry_full else 1
            cth = cos(th[i]); sth = sin(th[i])
            r = radius[i]
            for k in range(n_cand):
                if geometry_full:
                    ex = cand_local[i, k, 0]
                    ez = cand_local[i, k, 1]
                else:
                    ex = 0.0
                    ez = 0.0
                cxw = posx[i] + cth * ex + sth * ez
                czw = posz[i] - sth * ex + cth * ez
                for row in range(2):
                    if row == 0:
                        pen = r - czw
                        if pen <= 0.0:
                            continue
                        nx = 0.0; nz = 1.0
                        px = cxw; pz = czw - r
                    else:
                        if not obs_active:
                            continue
                        closx = _clampd(cxw, obs_x0, obs_x1)
                        closz = _clampd(czw, 0.0, obs_h)
                        dx = cxw - closx
                        dz = czw - closz
                        dist = hypot(dx, dz)
                        if dist > 1e-12:
                            if dist >= r:
                                continue
                            pen = r - dist
                            nx = dx / dist; nz = dz / dist
                            px = closx; pz = closz
                        else:
                            e0 = cxw - obs_x0
                            e1 = obs_x1 - cxw
                            e2 = obs_h - czw
                            if e0 <= e1 and e0 <= e2:
                                pen = e0 + r; nx = -1.0; nz = 0.0
                            elif e1 <= e2:
                                pen = e1 + r; nx = 1.0; nz = 0.0
                            else:
                                pen = e2 + r; nx = 0.0; nz = 1.0
                            px = cxw; pz = czw
                    armx = px - posx[i]
                    armz = pz - posz[i]
                    vpx = velx[i] + om[i] * armz
                    vpz = velz[i] - om[i] * armx
                    cr_n = armz * nx - armx * nz
                    tx = nz; tz = -nx
                    cr_t = armz * tx - armx * tz
                    m_eff_n = 1.0 / (inv_mass[i] + cr_n * cr_n * inv_inertia[i])
                    m_eff_t = 1.0 / (inv_mass[i] + cr_t * cr_t * inv_inertia[i])
                    cap_share = dt * n_cand
                    pen_rate = -(vpx * nx + vpz * nz)
                    cd = c_n_base
                    if m_eff_n / cap_share < cd:
                        cd = m_eff_n / cap_share
                    fn = k_n * pen + cd * pen_rate
                    if fn < 0.0:
                        fn = 0.0
                    vt = vpx * tx + vpz * tz
                    kt_c = k_t
                    if m_eff_t / cap_share < kt_c:
                        kt_c = m_eff_t / cap_share
                    ft = kt_c * fabs(vt)
                    if ft > mu * fn:
                        ft = mu * fn
                    if vt > 0.0:
                        ft = -ft
                    elif vt == 0.0:
                        ft = 0.0
                    Fx = fn * nx + ft * tx
                    Fz = fn * nz + ft * tz
                    fx[i] += Fx
                    fz[i] += Fz
                    tqv[i] += armz * Fx - armx * Fz
                    lfx[i] += Fx
                    lfz[i] += Fz
                    grfx += Fx
                    grfz += Fz
                    if nc < MAXCT:
                        ct_link[nc] = i
                        ct_fx[nc] = Fx; ct_fz[nc] = Fz
                        ct_nx[nc] = nx; ct_nz[nc] = nz
                        ct_px[nc] = px; ct_pz[nc] = pz
                        nc += 1

        # ---- unconstrained velocity update
        for i in range(L):
            vflat[3 * i] = velx[i] + dt * fx[i] * inv_mass[i]
            vflat[3 * i + 1] = velz[i] + dt * fz[i] * inv_mass[i]
            vflat[3 * i + 2] = om[i] + dt * tqv[i] * inv_inertia[i]

        # ---- joint constraints + implicit joint damping
        n3 = 3 * J
        if J > 0:
            for row in range(n3):
                for col in range(3 * L):
                    G[row][col] = 0.0
            for j in range(J):
                p = jparent[j]
                c = jchild[j]
                G[2 * j][3 * c] = 1.0
                G[2 * j][3 * c + 2] = rcz[j]
                G[2 * j][3 * p] = -1.0
                G[2 * j][3 * p + 2] = -rpz[j]
                G[2 * j + 1][3 * c + 1] = 1.0
                G[2 * j + 1][3 * c + 2] = -rcx[j]
                G[2 * j + 1][3 * p + 1] = -1.0
                G[2 * j + 1][3 * p + 2] = rpx[j]
                G[2 * J + j][3 * c + 2] = 1.0
                G[2 * J + j][3 * p + 2] = -1.0
            for row in range(n3):
                for col in range(row, n3):
                    s = 0.0
                    for i in range(3 * L):
                        s += G[row][i] * invm_diag[i] * G[col][i]
                    A[row * n3 + col] = s
                    A[col * n3 + row] = s
                s = 0.0
                for i in range(3 * L):
                    s += G[row][i] * vflat[i]
                rhs[row] = -s
            for row in range(2 * J):
                A[row * n3 + row] += 1e-10
            for j in range(J):
                row = 2 * J + j
                if damping[j] > 1e-12:
                    A[row * n3 + row] += 1.0 / (dt * damping[j])
                else:
                    A[row * n3 + row] += 1e12
            if _cholesky_solve(&A[0], &rhs[0], n3):
                return sub
            for j in range(J):
                lamx[j] = rhs[2 * j]
                lamz[j] = rhs[2 * j + 1]
                uimp[j] = rhs[2 * J + j]
            for i in range(3 * L):
                s = 0.0
                for row in range(n3):
                    s += G[row][i] * rhs[row]
                vflat[i] += invm_diag[i] * s
        else:
            for j in range(J):
                lamx[j] = 0.0
                lamz[j] = 0.0
                uimp[j] = 0.0

        # ---- generalized velocities, clamp
        new_base_vel[0] = vflat[0]
        new_base_vel[1] = vflat[1]
        new_base_vel[2] = vflat[2]
        n_clamped = 0
        for j in range(J):
            s = vflat[3 * jchild[j] + 2] - vflat[3 * jparent[j] + 2]
            if s > qd_max:
                s = qd_max
                n_clamped += 1
            elif s < -qd_max:
                s = -qd_max
                n_clamped += 1
            new_qd[j] = s

        finite = 1
        for i in range(3):
            if not (isfinite(new_base[i]) and isfinite(new_base_vel[i])):
                finite = 0
        for j in range(J):
            if not (isfinite(new_q[j]) and isfinite(new_qd[j])):
                finite = 0
        if not finite:
            return sub

        for i in range(3):
            base[i] = new_base[i]
            base_vel[i] = new_base_vel[i]
        for j in range(J):
            q[j] = new_q[j]
            qd[j] = new_qd[j]

        # ---- readouts
        for j in range(J):
            reaction[j] = hypot(lamx[j], lamz[j]) / dt
            if damping[j] > 1e-12:
                frac = (kd_eff[j] if use_pd else 0.0) / damping[j]
            else:
                frac = 0.0
            motor[j] = spring[j] + (uimp[j] / dt) * frac
            t_lim_tot[j] = t_lim[j] + (uimp[j] / dt) * (1.0 - frac)
            tau_ext[j] = t_lim_tot[j]
        for k in range(nc):
            i = ct_link[k]
            j = parent_joint[i]
            if j >= 0:
                tau_ext[j] += (ct_pz[k] - awz[j]) * ct_fx[k] \
                    - (ct_px[k] - awx[j]) * ct_fz[k]
        for k in range(J):
            p = jparent[k]
            j = parent_joint[p]
            if j >= 0:
                rf_x = -lamx[k] / dt
                rf_z = -lamz[k] / dt
                tau_ext[j] += (awz[k] - awz[j]) * rf_x - (awx[k] - awx[j]) * rf_z
                tau_ext[j] -= t_lim_tot[k]

        for i in range(L):
            fmag = hypot(lfx[i], lfz[i])
            if fmag > out_link_force[i]:
                out_link_force[i] = fmag
            if fmag > 0.0:
                out_link_contact[i] = 1
        for j in range(J):
            if reaction[j] > out_joint_reaction[j]:
                out_joint_reaction[j] = reaction[j]
            if fabs(tau_ext[j]) > fabs(out_joint_ext[j]):
                out_joint_ext[j] = tau_ext[j]
            s = fabs(motor[j] + tau_ext[j])
            if s > out_tau_total[j]:
                out_tau_total[j] = s
            if fabs(motor[j]) > out_motor_abs[j]:
                out_motor_abs[j] = fabs(motor[j])
            out_motor_last[j] = motor[j]
        out_grf_last[0] = grfx
        out_grf_last[1] = grfz
        mag = hypot(grfx, grfz)
        if mag > out_scalars[0]:
            out_scalars[0] = mag
        out_scalars[1] += grfx * dt
        out_scalars[2] += grfz * dt
        if n_limit > out_scalars[3]:
            out_scalars[3] = n_limit
        out_scalars[4] += n_clamped

        if record_events and sub == n_substeps - 1:
            out_scalars[5] = nc
            for k in range(nc):
                ev_link[k] = ct_link[k]
                ev_force[k] = hypot(ct_fx[k], ct_fz[k])
                ev_normal[k, 0] = ct_nx[k]
                ev_normal[k, 1] = ct_nz[k]
                ev_point[k, 0] = ct_px[k]
                ev_point[k, 1] = ct_pz[k]
            for j in range(J):
                out_joint_reaction_last[j] = reaction[j]
                out_joint_ext_last[j] = tau_ext[j]
            for i in range(L):
                out_link_force_last[i] = hypot(lfx[i], lfz[i])

    return n_substeps
