import numpy as np
import pytest

from lcap import LongitudinalDataset, ModelParams, VisitBlock


def make_block(subject, visit, rows, x, centered=False):
    return VisitBlock(
        subject_id=subject,
        visit_index=visit,
        observations=np.asarray(rows, dtype=np.float64),
        covariates=np.asarray(x, dtype=np.float64),
        centered=centered,
    )


def exact_cov_block(subject, visit, cov, T, x, rng):
    """A centered block whose sample covariance equals ``cov`` exactly.

    Rows are sqrt(T) * Q * chol(cov)' with Q an orthonormal T x p frame whose
    columns are orthogonal to the ones vector, so the column means are zero
    and Y'Y / T == cov to machine precision.
    """
    cov = np.asarray(cov, dtype=np.float64)
    p = cov.shape[0]
    if T < p + 1:
        raise ValueError("need T >= p + 1 for an exact-covariance frame")
    M = rng.standard_normal((T, p))
    M = M - M.mean(axis=0, keepdims=True)
    Q, _ = np.linalg.qr(M)
    L = np.linalg.cholesky(cov)
    Y = np.sqrt(T) * Q @ L.T
    return make_block(subject, visit, Y, x, centered=True)


def random_dataset(rng, n=3, V=2, T=8, p=3, q=2, centered=True):
    """Random centered dataset with well-conditioned blocks."""
    blocks = []
    for i in range(n):
        for v in range(V):
            Y = rng.standard_normal((T, p)) * (1.0 + 0.3 * rng.random())
            if centered:
                Y = Y - Y.mean(axis=0, keepdims=True)
            blocks.append(
                VisitBlock(
                    subject_id=f"s{i + 1:03d}",
                    visit_index=v + 1,
                    observations=Y,
                    covariates=rng.standard_normal(q),
                    centered=centered,
                )
            )
    return LongitudinalDataset.from_blocks(blocks)


def random_params(rng, ds, scale=0.5):
    gamma = rng.standard_normal(ds.p)
    gamma /= np.linalg.norm(gamma)
    return ModelParams(
        gamma=gamma,
        beta0=scale * rng.standard_normal(),
        beta1=scale * rng.standard_normal(ds.q),
        beta0i=scale * rng.standard_normal(ds.n),
        sigma2=0.5 + rng.random(),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240809)
