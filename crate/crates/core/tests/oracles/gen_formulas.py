"""Independent high-precision evaluation of the schedule and calibration
formulas at seeded random points.

Writes formulas.csv next to this file: `formula,args,value` where `args` is a
`;`-separated list in the order of the Rust function's parameters.

    python3 gen_formulas.py
"""

import csv
import os
import random

from mpmath import mp, mpf, sqrt, log, ceil

mp.dps = 50
POINTS = 20


def sigma2(L, R, n, eps, delta):
    return 256 * L**2 * R * log(mpf(5) / 2 * R / delta) * log(2 / delta) / (n**2 * eps**2)


def smooth_lambda(L, D, M, n, d, eps, delta):
    return L / (D * n * sqrt(M)) * max(sqrt(n), sqrt(d * log(1 / delta)) / eps)


def subgrad_eta(L, D, M, n, d, eps, delta):
    return D * sqrt(M) / L * min(1 / sqrt(n), eps / sqrt(d * log(1 / delta)))


def beta_nesterov(L, D, M, n, d, eps, delta):
    return L * sqrt(M) / D * min(sqrt(n), eps * n / sqrt(d * log(1 / delta)))


def s_conv(D, M, n, d, eps, delta):
    return D / sqrt(M) * (1 / sqrt(n) + sqrt(d * log(1 / delta)) / (eps * n))


def stage_rounds(k, mu, beta, L, Delta):
    a = 4 * sqrt(2 * beta / mu)
    b = 128 * L**2 / (3 * mu * Delta * mpf(2) ** (-(k + 1)))
    return ceil(max(a, b))


def stage_upsilon(k, R, mu, beta, Delta, V2):
    inner = mu * V2 / (3 * Delta * mpf(2) ** (-(k - 1)) * R * (R + 1) * (R + 2))
    return max(2 * beta, sqrt(inner))


def rounds_raw(L, D, beta, N, M, n_i, K, d, eps, delta, lam):
    accel = sqrt((beta + lam) / lam) * log(L * D * lam * M * eps**2 * n_i**2 / (L**2 * d))
    sampling = eps**2 * n_i**2 / (K * d * log(1 / delta)) if M * K < N * n_i else mpf(0)
    return max(accel, sampling)


def main():
    rng = random.Random(20240611)
    rows = []

    def u(a, b):
        return rng.uniform(a, b)

    def budget():
        delta = 10 ** u(-9, -3)
        cap = 2 * float(log(2 / mpf(delta)))
        return min(u(0.1, 8.0), cap * 0.99), delta

    for _ in range(POINTS):
        L, R, n = u(0.1, 5), rng.randint(1, 5000), rng.randint(2, 100000)
        eps, delta = budget()
        rows.append(("calibrate_sigma2", [L, R, n, eps, delta], sigma2(mpf(L), R, n, mpf(eps), mpf(delta))))
    for name, fn in [("smooth_lambda", smooth_lambda), ("subgrad_eta", subgrad_eta), ("choose_beta_nesterov", beta_nesterov)]:
        for _ in range(POINTS):
            L, D, M, n, d = u(0.1, 5), u(0.1, 10), rng.randint(1, 64), rng.randint(2, 100000), rng.randint(1, 500)
            eps, delta = budget()
            rows.append((name, [L, D, M, n, d, eps, delta], fn(mpf(L), mpf(D), M, n, d, mpf(eps), mpf(delta))))
    for _ in range(POINTS):
        D, M, n, d = u(0.1, 10), rng.randint(1, 64), rng.randint(2, 100000), rng.randint(1, 500)
        eps, delta = budget()
        rows.append(("choose_s_conv", [D, M, n, d, eps, delta], s_conv(mpf(D), M, n, d, mpf(eps), mpf(delta))))
    for _ in range(POINTS):
        while True:
            k, mu, beta, L, Delta = rng.randint(1, 12), 10 ** u(-3, 1), 10 ** u(-2, 3), u(0.1, 5), u(0.1, 50)
            v = stage_rounds(k, mpf(mu), mpf(beta), mpf(L), mpf(Delta))
            raw = max(4 * sqrt(2 * mpf(beta) / mu), 128 * mpf(L) ** 2 / (3 * mu * Delta * mpf(2) ** (-(k + 1))))
            # keep away from ceil ties so double rounding cannot flip the result
            if v - raw > 1e-6 and v < 2**52:
                break
        rows.append(("stage_rounds", [k, mu, beta, L, Delta], v))
    for _ in range(POINTS):
        k, R, mu, beta, Delta, V2 = rng.randint(1, 12), rng.randint(1, 5000), 10 ** u(-3, 1), 10 ** u(-3, 2), u(0.1, 50), 10 ** u(-2, 4)
        rows.append(("stage_upsilon", [k, R, mu, beta, Delta, V2], stage_upsilon(k, R, mpf(mu), mpf(beta), mpf(Delta), mpf(V2))))
    for _ in range(POINTS):
        L, D, beta = u(0.1, 5), u(0.1, 10), 10 ** u(-2, 2)
        N = rng.randint(1, 64)
        M = rng.randint(1, N)
        n_i = rng.randint(1, 50000)
        K = rng.randint(1, n_i)
        d = rng.randint(1, 500)
        eps, delta = budget()
        lam = 10 ** u(-4, 2)
        rows.append(("rounds_raw", [L, D, beta, N, M, n_i, K, d, eps, delta, lam],
                     rounds_raw(mpf(L), mpf(D), mpf(beta), N, M, n_i, K, d, mpf(eps), mpf(delta), mpf(lam))))

    out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "formulas.csv")
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["formula", "args", "value"])
        for name, args, value in rows:
            w.writerow([name, ";".join(repr(a) for a in args), mp.nstr(value, 30)])


if __name__ == "__main__":
    main()
