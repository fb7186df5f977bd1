"""Synthetic stand-in for the Pima diabetes extract (752 rows, 264 cases).

Covariates mimic the marginal shape of Pregnancies, Glucose and BMI. Labels
are drawn from a logistic model on the standardized covariates, then swapped
in case/control pairs (keeping 264 cases) until the full-data fit lands on the
target coefficients. The frozen benchmark is computed with statsmodels.
"""
import json
import sys

import numpy as np
import statsmodels.api as sm

TARGET = np.array([-0.835, 1.135, 0.443, 0.623])
N, N1 = 752, 264


def standardize(x):
    return (x - x.mean(0)) / x.std(0, ddof=1)


def fit(z, y, start=None):
    d = np.column_stack([np.ones(len(y)), z])
    b = np.zeros(d.shape[1]) if start is None else start.copy()
    for _ in range(50):
        p = 1 / (1 + np.exp(-d @ b))
        g = d.T @ (y - p)
        h = d.T @ (d * (p * (1 - p))[:, None])
        step = np.linalg.solve(h, g)
        b += step
        if np.abs(step).max() < 1e-12:
            break
    return b


def main(seed=20240601, out="data/pima_standin.csv", bench="data/pima_standin_benchmark.json"):
    rng = np.random.default_rng(seed)
    preg = np.minimum(rng.poisson(3.8, N), 17).astype(float)
    glucose = np.clip(np.round(rng.normal(121.0, 30.5, N)), 44, 199)
    bmi = np.clip(np.round(rng.normal(32.4, 6.9, N), 1), 18.2, 67.1)
    x = np.column_stack([glucose, preg, bmi])
    z = standardize(x)
    eta = TARGET[0] + z @ TARGET[1:]
    # exactly N1 cases: take the N1 largest of eta + logistic noise
    u = rng.uniform(size=N)
    y = np.zeros(N)
    y[np.argsort(-(eta + np.log(u / (1 - u))))[:N1]] = 1.0

    b = fit(z, y)
    for _ in range(20000):
        err = np.abs(b - TARGET).max()
        if err < 2e-3:
            break
        cases = rng.choice(np.flatnonzero(y == 1), 64)
        ctrls = rng.choice(np.flatnonzero(y == 0), 64)
        best = (err, None)
        for i, j in zip(cases, ctrls):
            y[i], y[j] = 0.0, 1.0
            bb = fit(z, y, b)
            e = np.abs(bb - TARGET).max()
            if e < best[0]:
                best = (e, (i, j, bb))
            y[i], y[j] = 1.0, 0.0
        if best[1] is None:
            continue
        i, j, b = best[1]
        y[i], y[j] = 0.0, 1.0

    assert int(y.sum()) == N1
    with open(out, "w") as f:
        f.write("Pregnancies,Glucose,BMI,Outcome\n")
        for k in range(N):
            f.write(f"{int(preg[k])},{int(glucose[k])},{bmi[k]:.1f},{int(y[k])}\n")

    # reload exactly what was written and fit with statsmodels
    raw = np.loadtxt(out, delimiter=",", skiprows=1)
    zz = standardize(raw[:, [1, 0, 2]])
    res = sm.Logit(raw[:, 3], sm.add_constant(zz)).fit(disp=0, tol=1e-12, maxiter=100)
    bench_doc = {
        "covariates": ["Glucose", "Pregnancies", "BMI"],
        "alpha": float(res.params[0]),
        "beta": [float(v) for v in res.params[1:]],
        "se": [float(v) for v in res.bse],
        "case_proportion": float(raw[:, 3].mean()),
        "n": N,
        "n1": int(raw[:, 3].sum()),
    }
    with open(bench, "w") as f:
        json.dump(bench_doc, f, indent=2)
        f.write("\n")
    print(json.dumps(bench_doc, indent=2))


if __name__ == "__main__":
    main(*sys.argv[1:])
