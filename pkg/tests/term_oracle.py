"""Plain-loop reference evaluation of the transformed nonlinearities.

Every sum is written out exactly as the formulas read, one point at a time,
with no vectorization; the production einsum kernel must agree to roundoff.
"""

import numpy as np


def f_u_point(G, H, Z, dZ, J, rho0, grad_p, mu, lam):
    d = G.shape[0]
    F = np.zeros(d)
    for i in range(d):
        acc = mu * sum(H[i, k, k] for k in range(d))
        acc += (mu + lam) * sum(H[j, i, j] for j in range(d))
        F[i] += (J - 1.0) / rho0 * acc

        t1 = sum(H[i, k, l] * (Z[k, j] - (k == j)) * Z[l, j]
                 for j in range(d) for k in range(d) for l in range(d))
        t2 = sum(H[i, k, l] * (Z[l, k] - (l == k))
                 for k in range(d) for l in range(d))
        t3 = sum(Z[l, j] * G[i, k] * dZ[k, j, l]
                 for j in range(d) for k in range(d) for l in range(d))
        F[i] += mu * J / rho0 * (t1 + t2 + t3)

        s1 = sum(H[j, k, l] * (Z[k, j] - (k == j)) * Z[l, i]
                 for j in range(d) for k in range(d) for l in range(d))
        s2 = sum(H[j, j, l] * (Z[l, i] - (l == i))
                 for j in range(d) for l in range(d))
        s3 = sum(Z[l, i] * G[j, k] * dZ[k, j, l]
                 for j in range(d) for k in range(d) for l in range(d))
        F[i] += (mu + lam) * J / rho0 * (s1 + s2 + s3)

        F[i] -= J / rho0 * sum(Z[j, i] * grad_p[j] for j in range(d))
    return F


def f_gamma_point(G, Z, J, N, p_val, p_ext, mu, lam):
    d = G.shape[0]
    F = np.zeros(d)
    S = [J * sum(Z[l, j] * N[l] for l in range(d)) for j in range(d)]
    for i in range(d):
        F[i] += mu * sum(G[i, j] * (N[j] - S[j]) for j in range(d))
        F[i] += mu * sum(G[j, i] * (N[j] - S[j]) for j in range(d))
        F[i] += lam * sum(G[k, k] for k in range(d)) * (N[i] - S[i])
        F[i] += mu * sum(((k == j) - Z[k, j]) * G[i, k] * S[j]
                         for j in range(d) for k in range(d))
        F[i] += mu * sum(((k == i) - Z[k, i]) * G[j, k] * S[j]
                         for j in range(d) for k in range(d))
        F[i] += lam * (sum(G[k, k] for k in range(d))
                       - sum(Z[l, k] * G[k, l]
                             for k in range(d) for l in range(d))) * S[i]
        F[i] += (p_val - p_ext) * S[i]
    return F
