import numpy as np


def hsic_unbiased_oracle(K, L) -> float:
    """Literal term-by-term transcription of the unbiased HSIC estimate,
    written independently of the library implementation: explicit
    zero-diagonal copies, explicit ones-vector products, explicit trace of
    the matrix product."""
    K = np.asarray(K, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    B = K.shape[0]
    Kt = K.copy()
    Lt = L.copy()
    np.fill_diagonal(Kt, 0.0)
    np.fill_diagonal(Lt, 0.0)
    ones = np.ones(B)
    term1 = np.trace(Kt @ Lt)
    term2 = (ones @ Kt @ ones) * (ones @ Lt @ ones) / ((B - 1) * (B - 2))
    term3 = (2.0 / (B - 2)) * (ones @ Kt @ Lt @ ones)
    return float((term1 + term2 - term3) / (B * (B - 3)))


def cka_oracle(X, Y) -> float:
    """CKA via the oracle HSIC and brute-force inner-product grams."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)

    def gram(A):
        B = A.shape[0]
        out = np.empty((B, B))
        for i in range(B):
            for j in range(B):
                out[i, j] = float(np.dot(A[i], A[j]))
        return out

    kx, ky = gram(X), gram(Y)
    hxy = hsic_unbiased_oracle(kx, ky)
    hxx = hsic_unbiased_oracle(kx, kx)
    hyy = hsic_unbiased_oracle(ky, ky)
    return hxy / np.sqrt(hxx * hyy)


def js_oracle(p, q) -> float:
    """Literal two-term KL transcription with the 0 log 0 = 0 convention."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def kl(a, b):
        total = 0.0
        for ai, bi in zip(a, b):
            if ai > 0.0:
                total += ai * (np.log(ai) - np.log(bi))
        return total

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def random_distribution(rng, n, sparse=False):
    v = rng.uniform(0.0, 1.0, size=n)
    if sparse:
        v[rng.random(n) < 0.3] = 0.0
        if v.sum() == 0.0:
            v[rng.integers(n)] = 1.0
    return v / v.sum()
