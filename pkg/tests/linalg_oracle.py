"""Plain-Python linear algebra for checking the Frechet distance without numpy.linalg."""

import math


def cholesky(a):
    n = len(a)
    low = [[0.0] * n for _ in range(n)]
    for i in range(n):
        for j in range(i + 1):
            s = a[i][j] - sum(low[i][k] * low[j][k] for k in range(j))
            low[i][j] = math.sqrt(s) if i == j else s / low[j][j]
    return low


def jacobi_eigenvalues(a, sweeps=100, tol=1e-15):
    """Cyclic Jacobi rotations on a symmetric matrix; returns its eigenvalues."""
    n = len(a)
    m = [row[:] for row in a]
    for _ in range(sweeps):
        off = sum(m[i][j] ** 2 for i in range(n) for j in range(n) if i != j)
        if off < tol * tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(m[p][q]) < 1e-300:
                    continue
                theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    mkp, mkq = m[k][p], m[k][q]
                    m[k][p], m[k][q] = c * mkp - s * mkq, s * mkp + c * mkq
                for k in range(n):
                    mpk, mqk = m[p][k], m[q][k]
                    m[p][k], m[q][k] = c * mpk - s * mqk, s * mpk + c * mqk
    return [m[i][i] for i in range(n)]


def frechet_brute_force(mu1, s1, mu2, s2):
    """|dmu|^2 + tr S1 + tr S2 - 2 sum sqrt(eig(L^T S2 L)) with S1 = L L^T.

    L^T S2 L is similar to S1 S2, so its eigenvalues are those of S1 S2.
    """
    n = len(mu1)
    low = cholesky(s1)
    s2l = [[sum(s2[i][k] * low[k][j] for k in range(n)) for j in range(n)] for i in range(n)]
    mid = [[sum(low[k][i] * s2l[k][j] for k in range(n)) for j in range(n)] for i in range(n)]
    eig = jacobi_eigenvalues(mid)
    cross = sum(math.sqrt(max(e, 0.0)) for e in eig)
    diff = sum((x - y) ** 2 for x, y in zip(mu1, mu2))
    return diff + sum(s1[i][i] for i in range(n)) + sum(s2[i][i] for i in range(n)) - 2.0 * cross
