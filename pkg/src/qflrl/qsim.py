"""Driven, decaying cavity mode under continuous weak measurement.

The state is a density matrix on the Fock basis ``|0>..|N-1>``. One call to
``CavitySME.step`` advances an RL time step ``dt`` through ``substeps``
Euler-Maruyama increments of

    drho = [-i[H, rho] + kappa D[a] rho + kappa' D[A] rho] dt
           + sqrt(kappa') (A rho + rho A^+ - <A + A^+> rho) dW

and emits one measurement sample per increment,
``X = sqrt(kappa') <A + A^+> + dW / dt``.

Two inner-step schemes are available. ``euler`` adds the increment above
literally. ``kraus`` (default) applies the measurement operator
``M = 1 - (iH + kappa a^+a/2 + kappa' A^+A/2) dt + sqrt(kappa') A dY`` with
``dY = X dt`` and adds the decay jump ``kappa a rho a^+ dt``; expanding to first
order in dt (with dY^2 -> dt) gives back the Euler increment, but every step is
a completely positive map so the density matrix never acquires negative
eigenvalues.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

from .numkit import hermitian_eig

LEAK_THRESHOLD = 1e-3


class IntegrationError(FloatingPointError):
    def __init__(self, msg, trajectory=None):
        super().__init__(msg if trajectory is None else f"{msg} (trajectory {trajectory})")
        self.trajectory = trajectory


# ------------------------------------------------------------------- operators

def annihilation(n_cutoff):
    if n_cutoff < 2:
        raise ValueError("n_cutoff must be at least 2")
    return np.diag(np.sqrt(np.arange(1, n_cutoff)), 1).astype(complex)


def number_operator(n_cutoff):
    return np.diag(np.arange(n_cutoff)).astype(complex)


def drive_hamiltonian(alpha_in, kappa, n_cutoff):
    a = annihilation(n_cutoff)
    return 1j * np.sqrt(kappa) * (alpha_in * a.conj().T - np.conj(alpha_in) * a)


def lindblad_dissipator(rho, r, rate=1.0):
    """rate * (R rho R^+ - {R^+ R, rho}/2)."""
    rd = r.conj().T
    rdr = rd @ r
    return rate * (r @ rho @ rd - 0.5 * (rdr @ rho + rho @ rdr))


def expectation(rho, op):
    return complex(np.trace(rho @ op))


def fock_overlap(rho, n):
    if not 0 <= n < rho.shape[-1]:
        raise ValueError(f"Fock index {n} outside the cutoff")
    return np.real(rho[..., n, n])


def fock_state(n, n_cutoff):
    rho = np.zeros((n_cutoff, n_cutoff), complex)
    rho[n, n] = 1.0
    return rho


def coherent_state(beta, n_cutoff):
    """Normalised truncated coherent state |beta><beta|."""
    k = np.arange(n_cutoff)
    logfact = np.cumsum(np.log(np.maximum(k, 1)))
    amp = np.exp(-abs(beta) ** 2 / 2 - 0.5 * logfact) * beta ** k
    amp = amp / np.linalg.norm(amp)
    return np.outer(amp, amp.conj())


def operator_norm(op):
    lam, _ = hermitian_eig(op.conj().T @ op)
    return float(np.sqrt(max(lam[0], 0.0)))


def check_density_matrix(rho, atol=1e-10):
    """Return a list of violated invariants (empty when rho is valid)."""
    problems = []
    if np.max(np.abs(rho - rho.conj().T)) > atol:
        problems.append("not Hermitian")
    if abs(np.trace(rho).real - 1.0) > atol:
        problems.append("trace differs from 1")
    if np.min(np.linalg.eigvalsh(rho)) < -1e-8:
        problems.append("negative eigenvalue")
    return problems


@njit(cache=True)
def _kraus_kernel(rho, alpha, xi, kappa, kappa_meas, dt, qnd, stochastic, out_x):
    """Fused Kraus-scheme inner loop over trajectories and substeps.

    Mutates ``rho`` (B, N, N) in place and fills ``out_x`` (B, S). Returns the
    index of the first trajectory whose trace degenerated, or -1.
    """
    B, N, _ = rho.shape
    S = xi.shape[1]
    sq = np.sqrt(np.arange(1, N).astype(np.float64))
    skp = np.sqrt(kappa_meas)
    sk = np.sqrt(kappa)
    sdt = np.sqrt(dt)
    d = np.empty(N, np.complex128)
    y = np.empty((N, N), np.complex128)
    o = np.empty((N, N), np.complex128)
    for b in range(B):
        r = rho[b]
        u = sk * alpha[b] * dt
        v0 = -sk * np.conj(alpha[b]) * dt
        for k in range(S):
            m = 0.0
            if qnd:
                for i in range(N):
                    m += 2.0 * i * r[i, i].real
            else:
                for i in range(N - 1):
                    m += 2.0 * sq[i] * r[i + 1, i].real
            x = skp * m + sdt * xi[b, k] / dt
            out_x[b, k] = x
            dY = x * dt if stochastic else 0.0
            v = v0
            for i in range(N):
                if qnd:
                    d[i] = 1.0 - 0.5 * dt * (kappa * i + kappa_meas * i * i) + skp * dY * i
                else:
                    d[i] = 1.0 - 0.5 * dt * (kappa + kappa_meas) * i
            if not qnd:
                v = v0 + skp * dY
            # y = M r
            for i in range(N):
                for j in range(N):
                    acc = d[i] * r[i, j]
                    if i >= 1:
                        acc += u * sq[i - 1] * r[i - 1, j]
                    if i < N - 1:
                        acc += v * sq[i] * r[i + 1, j]
                    y[i, j] = acc
            # o = M y^+ + kappa dt a r a^+ (+ kappa' dt A r A^+ when averaging)
            for i in range(N):
                for j in range(N):
                    acc = d[i] * np.conj(y[j, i])
                    if i >= 1:
                        acc += u * sq[i - 1] * np.conj(y[j, i - 1])
                    if i < N - 1:
                        acc += v * sq[i] * np.conj(y[j, i + 1])
                        if j < N - 1:
                            acc += kappa * dt * sq[i] * sq[j] * r[i + 1, j + 1]
                    if not stochastic and kappa_meas > 0.0:
                        if qnd:
                            acc += kappa_meas * dt * i * j * r[i, j]
                        elif i < N - 1 and j < N - 1:
                            acc += kappa_meas * dt * sq[i] * sq[j] * r[i + 1, j + 1]
                    o[i, j] = acc
            tr = 0.0
            for i in range(N):
                tr += o[i, i].real
            if not (np.isfinite(tr) and tr > 1e-300):
                return b
            for i in range(N):
                for j in range(N):
                    r[i, j] = 0.5 * (o[i, j] + np.conj(o[j, i])) / tr
    return -1


# ---------------------------------------------------------------------- config

@dataclass
class SMEConfig:
    kappa: float = 1.0
    kappa_meas: float = 0.5
    dt: float = 0.2
    substeps: int = 200
    measurement: str = "qnd"  # "homodyne": A = a, "qnd": A = a^+ a
    n_cutoff: int = 8
    # "kraus": rho <- M rho M^+ + kappa a rho a^+ dt (positive by construction);
    # "euler": the plain Euler-Maruyama increment. Both agree to first order.
    scheme: str = "kraus"

    @property
    def inner_dt(self):
        return self.dt / self.substeps

    def measurement_operator(self):
        if self.measurement == "homodyne":
            return annihilation(self.n_cutoff)
        if self.measurement == "qnd":
            return number_operator(self.n_cutoff)
        raise ValueError(f"unknown measurement {self.measurement!r}")

    def stability_number(self):
        """(kappa + 4 kappa' |A|^2) * inner dt; must stay below 0.1."""
        norm = operator_norm(self.measurement_operator())
        return (self.kappa + 4 * self.kappa_meas * norm**2) * self.inner_dt

    def violations(self):
        out = []
        if self.kappa < 0 or self.kappa_meas < 0:
            out.append("rates must be non-negative")
        if not self.dt > 0:
            out.append("dt must be positive")
        if self.substeps < 1:
            out.append("substeps must be >= 1")
        if self.measurement not in ("homodyne", "qnd"):
            out.append(f"unknown measurement {self.measurement!r}")
        if self.n_cutoff < 2:
            out.append("n_cutoff must be >= 2")
        if self.scheme not in ("kraus", "euler"):
            out.append(f"unknown scheme {self.scheme!r}")
        if not out and self.stability_number() >= 0.1:
            out.append(f"SME stability bound violated: (kappa + 4 kappa' |A|^2) dt = "
                       f"{self.stability_number():.4g} >= 0.1")
        return out

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------- simulator

class CavitySME:
    """Batched Euler-Maruyama integrator specialised to ladder-structured operators.

    ``a`` only has a first superdiagonal and both choices of measurement
    operator are either diagonal (``a^+ a``) or equal to ``a``, so every
    operator product is done by shifting rows or columns instead of dense
    matrix products. ``reference_step`` is the plain dense version.
    """

    def __init__(self, config: SMEConfig, check=True, backend="numba"):
        if check:
            bad = config.violations()
            if bad:
                raise ValueError("; ".join(bad))
        if backend not in ("numba", "numpy"):
            raise ValueError(f"unknown backend {backend!r}")
        self.backend = backend
        self.config = config
        N = config.n_cutoff
        self.N = N
        self.sq = np.sqrt(np.arange(1, N))[:, None]
        self.sqsq = self.sq * self.sq.T
        n = np.arange(N, dtype=float)
        self.n = n
        k, kp = config.kappa, config.kappa_meas
        # elementwise part of the deterministic generator
        K = -0.5 * k * (n[:, None] + n[None, :])
        if config.measurement == "qnd":
            K = K - 0.5 * kp * (n[:, None] - n[None, :]) ** 2
            self.nsum = n[:, None] + n[None, :]
        else:
            K = K - 0.5 * kp * (n[:, None] + n[None, :])
        self.K = K
        self.AdA = n**2 if config.measurement == "qnd" else n
        self.leak_warnings = 0
        self.steps_taken = 0

    # ladder products on (..., N, N) stacks
    def _a_left(self, x):
        out = np.zeros_like(x)
        out[..., :-1, :] = self.sq * x[..., 1:, :]
        return out

    def _adag_left(self, x):
        out = np.zeros_like(x)
        out[..., 1:, :] = self.sq * x[..., :-1, :]
        return out

    def _a_rho_adag(self, x):
        out = np.zeros_like(x)
        out[..., :-1, :-1] = self.sqsq * x[..., 1:, 1:]
        return out

    def signal_mean(self, rho):
        """<A + A^+> for each density matrix in the stack."""
        if self.config.measurement == "qnd":
            return 2.0 * np.einsum("...ii,i->...", rho, self.n).real
        # tr(a rho) = sum_i sqrt(i+1) rho[i+1, i]
        return 2.0 * np.einsum("...ii,i->...", rho[..., 1:, :-1], self.sq[:, 0]).real

    def _drift(self, rho, alpha):
        c = self.config
        G = np.sqrt(c.kappa) * (alpha[..., None, None] * self._adag_left(rho)
                                - np.conj(alpha)[..., None, None] * self._a_left(rho))
        jump_rate = c.kappa + (c.kappa_meas if c.measurement == "homodyne" else 0.0)
        drift = G + np.swapaxes(G.conj(), -1, -2) + self.K * rho
        return drift + jump_rate * self._a_rho_adag(rho)

    def _A_rho_Adag(self, rho):
        if self.config.measurement == "qnd":
            return (self.n[:, None] * self.n[None, :]) * rho
        return self._a_rho_adag(rho)

    def _backaction(self, rho, m):
        if self.config.measurement == "qnd":
            return (self.nsum - m[..., None, None]) * rho
        y = self._a_left(rho)
        return y + np.swapaxes(y.conj(), -1, -2) - m[..., None, None] * rho

    def _apply_M(self, d, u, v, x):
        """(diag(d) + u a^+ + v a) @ x for per-trajectory d (B, N), u, v (B,)."""
        return (d[:, :, None] * x + u[:, None, None] * self._adag_left(x)
                + v[:, None, None] * self._a_left(x))

    def _kraus_update(self, rho, alpha, dY):
        c = self.config
        dt = c.inner_dt
        skp = np.sqrt(c.kappa_meas)
        d = 1.0 - 0.5 * dt * (c.kappa * self.n + c.kappa_meas * self.AdA)
        d = np.broadcast_to(d, rho.shape[:2]).astype(complex)
        u = np.sqrt(c.kappa) * alpha * dt
        v = -np.sqrt(c.kappa) * np.conj(alpha) * dt
        if c.measurement == "qnd":
            d = d + skp * dY[:, None] * self.n
        else:
            v = v + skp * dY
        y = self._apply_M(d, u, v, rho)
        out = self._apply_M(d, u, v, np.swapaxes(y.conj(), -1, -2))
        return out + (c.kappa * dt) * self._a_rho_adag(rho)

    def step(self, rho, alpha, noise=None, deterministic=False):
        """Advance by one RL step.

        ``rho``: (N, N) or (B, N, N); ``alpha``: scalar or (B,) drive amplitudes;
        ``noise``: standard normals of shape (substeps,) or (B, substeps).
        With ``deterministic=True`` the noise term is dropped (ensemble-averaged
        Lindblad evolution). Returns ``(rho, X)``; X has shape (substeps,) or
        (B, substeps).
        """
        c = self.config
        single = rho.ndim == 2
        rho = np.array(rho, dtype=complex)
        if single:
            rho = rho[None]
        B = rho.shape[0]
        alpha = np.broadcast_to(np.asarray(alpha, dtype=complex), (B,))
        if deterministic:
            xi = np.zeros((B, c.substeps))
        elif noise is None:
            raise ValueError("noise is required for a stochastic step")
        else:
            xi = np.asarray(noise, dtype=float).reshape(B, c.substeps)
        dt = c.inner_dt
        sdt = np.sqrt(dt)
        skp = np.sqrt(c.kappa_meas)
        stochastic = skp > 0 and not deterministic
        X = np.empty((B, c.substeps))
        if c.scheme == "kraus" and self.backend == "numba":
            rho = np.ascontiguousarray(rho)
            failed = _kraus_kernel(rho, np.ascontiguousarray(alpha), np.ascontiguousarray(xi),
                                   float(c.kappa), float(c.kappa_meas), float(dt),
                                   c.measurement == "qnd", bool(stochastic), X)
            if failed >= 0:
                raise IntegrationError("trace fell below the blow-up threshold before renormalisation", failed)
            return self._finish(rho, X, single)
        for k in range(c.substeps):
            m = self.signal_mean(rho)
            dW = sdt * xi[:, k]
            X[:, k] = skp * m + dW / dt
            if c.scheme == "kraus":
                dY = X[:, k] * dt if stochastic else np.zeros(B)
                if not stochastic and skp > 0:
                    # ensemble average: keep the dY^2 -> dt contribution explicitly
                    rho = self._kraus_update(rho, alpha, dY) + (c.kappa_meas * dt) * self._A_rho_Adag(rho)
                else:
                    rho = self._kraus_update(rho, alpha, dY)
            else:
                inc = dt * self._drift(rho, alpha)
                if stochastic:
                    inc += (skp * dW)[:, None, None] * self._backaction(rho, m)
                rho = rho + inc
            rho = 0.5 * (rho + np.swapaxes(rho.conj(), -1, -2))
            tr = np.einsum("bii->b", rho).real
            # For the Euler scheme the increment is traceless, so a trace far from 1
            # signals blow-up. For the Kraus scheme the trace is the likelihood
            # ratio of the measurement record and only has to stay positive.
            bad = ~(tr >= 0.5) if c.scheme == "euler" else ~(np.isfinite(tr) & (tr > 1e-300))
            if np.any(bad):
                raise IntegrationError("trace fell below the blow-up threshold before renormalisation",
                                       int(np.argmax(bad)))
            rho /= tr[:, None, None]
        return self._finish(rho, X, single)

    def _finish(self, rho, X, single):
        self.steps_taken += 1
        self.leak_warnings += int(np.sum(rho[:, -1, -1].real > LEAK_THRESHOLD))
        if single:
            return rho[0], X[0]
        return rho, X

    def reference_step(self, rho, alpha, noise):
        """Single-trajectory dense-matrix version of ``step`` (test oracle)."""
        c = self.config
        a = annihilation(self.N)
        A = c.measurement_operator()
        H = drive_hamiltonian(alpha, c.kappa, self.N)
        dt = c.inner_dt
        X = np.empty(c.substeps)
        rho = np.array(rho, dtype=complex)
        for k in range(c.substeps):
            m = expectation(rho, A + A.conj().T).real
            dW = np.sqrt(dt) * noise[k]
            X[k] = np.sqrt(c.kappa_meas) * m + dW / dt
            if c.scheme == "kraus":
                dY = X[k] * dt
                Mop = (np.eye(self.N) - dt * (1j * H + 0.5 * c.kappa * a.conj().T @ a
                                             + 0.5 * c.kappa_meas * A.conj().T @ A)
                       + np.sqrt(c.kappa_meas) * dY * A)
                rho = Mop @ rho @ Mop.conj().T + c.kappa * dt * a @ rho @ a.conj().T
            else:
                drift = (-1j * (H @ rho - rho @ H) + lindblad_dissipator(rho, a, c.kappa)
                         + lindblad_dissipator(rho, A, c.kappa_meas))
                back = A @ rho + rho @ A.conj().T - m * rho
                rho = rho + dt * drift + np.sqrt(c.kappa_meas) * dW * back
            rho = 0.5 * (rho + rho.conj().T)
            rho = rho / np.trace(rho).real
        return rho, X


def sme_step(rho, config: SMEConfig, alpha_in, rng, sim=None):
    """Advance one trajectory by ``config.dt``, drawing the noise from ``rng``."""
    sim = sim if sim is not None else CavitySME(config)
    noise = rng.normal(size=config.substeps)
    return sim.step(rho, alpha_in, noise)


def write_trajectory_csv(path, rho_history, signals, config: SMEConfig, trajectory_ids=None, dt=None):
    """Dump per-step photon-number populations and signal.

    ``rho_history``: (B, S, N) populations after each step; ``signals``: (B, S).
    Steps are inner steps by default; pass ``dt=config.dt`` for one row per
    RL step. Columns: trajectory_id, inner_step, time, X, P0..P{N-1}.
    """
    dt = config.inner_dt if dt is None else dt
    pops = np.asarray(rho_history)
    signals = np.asarray(signals)
    B, S = signals.shape
    ids = range(B) if trajectory_ids is None else trajectory_ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "inner_step", "time", "X"] + [f"P{j}" for j in range(config.n_cutoff)])
        for b, tid in zip(range(B), ids):
            for s in range(S):
                w.writerow([tid, s, repr((s + 1) * dt), repr(float(signals[b, s]))]
                           + [repr(float(p)) for p in pops[b, s]])
