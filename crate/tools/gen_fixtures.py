"""Reference loss values and embedding gradients, written from the loss
definitions with JAX autodiff in float64. Output: crates/core/tests/fixtures/losses.json
"""

import json
import pathlib

import jax
import jax.numpy as jnp
import numpy as np

jax.config.update("jax_enable_x64", True)

OUT = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/losses.json"


def cosine(z):
    u = z / jnp.linalg.norm(z, axis=1, keepdims=True)
    return u @ u.T


def masked_lse(logits, keep):
    return jax.nn.logsumexp(jnp.where(keep, logits, -jnp.inf), axis=1)


def ccm_mask(main, aux, cfg, use_aux):
    same_main = main[:, None] == main[None, :]
    if not use_aux:
        return np.where(same_main, cfg["alpha"], 1.0 / cfg["tau"])
    same_aux = aux[:, None] == aux[None, :]
    return np.where(same_main, np.where(same_aux, cfg["alpha"], cfg["beta"]), 1.0 / cfg["tau"])


def pair_loss(z, mask, tau):
    s = cosine(z)
    n = s.shape[0]
    idx = np.arange(n)
    partner = idx ^ 1
    keep = idx[:, None] != idx[None, :]
    lse = masked_lse(s * mask, keep)
    return jnp.mean(lse - s[idx, partner] / tau)


def spa_loss(z, mask, labels, tau):
    s = cosine(z)
    n = s.shape[0]
    parent = np.arange(n) // 2
    other_parent = parent[:, None] != parent[None, :]
    pos = other_parent & (labels[:, None] == labels[None, :])
    lse = masked_lse(s * mask, other_parent)
    total = 0.0
    for i in range(n):
        js = np.nonzero(pos[i])[0]
        if len(js) == 0:
            continue
        total = total + jnp.mean(lse[i] - s[i, js] / tau)
    return total / n


def supclr_loss(z, main, tau):
    s = cosine(z)
    n = s.shape[0]
    idx = np.arange(n)
    keep = idx[:, None] != idx[None, :]
    lse = masked_lse(s / tau, keep)
    total = 0.0
    for i in range(n):
        js = [k for k in range(n) if k != i and main[k] == main[i]]
        total = total + jnp.mean(lse[i] - s[i, np.array(js)] / tau)
    return total / n


def loss_fn(case):
    main = np.array(case["main_labels"])
    aux = np.array(case["aux_labels"]) if case["aux_labels"] is not None else None
    kind, cfg, use_aux = case["kind"], case, case["aux"]
    tau = cfg["tau"]
    if kind == "ntxent":
        mask = np.full((len(main), len(main)), 1.0 / tau)
        return lambda z: pair_loss(z, mask, tau)
    if kind == "ccm":
        mask = ccm_mask(main, aux, cfg, use_aux)
        return lambda z: pair_loss(z, mask, tau)
    if kind == "mcl":
        mask = ccm_mask(main, aux, cfg, use_aux)
        labels = main * 1000 + aux if use_aux else main
        return lambda z: pair_loss(z, mask, tau) + cfg["lambda"] * spa_loss(z, mask, labels, tau)
    if kind == "supclr":
        return lambda z: supclr_loss(z, main, tau)
    raise ValueError(kind)


def make_case(rng, name, kind, n_parents, dim, c_main, c_aux, use_aux, **cfg):
    parents = rng.integers(0, c_main, size=n_parents)
    main = np.repeat(parents, 2)
    aux = rng.integers(0, c_aux, size=2 * n_parents) if c_aux else None
    z = rng.normal(size=(2 * n_parents, dim))
    case = {
        "name": name,
        "kind": kind,
        "aux": use_aux,
        "tau": cfg.get("tau", 0.2),
        "alpha": cfg.get("alpha", 0.05),
        "beta": cfg.get("beta", 2.5),
        "lambda": cfg.get("lam", 1.0),
        "main_labels": main.tolist(),
        "aux_labels": aux.tolist() if aux is not None else None,
        "z": z.tolist(),
    }
    f = loss_fn(case)
    zj = jnp.asarray(z)
    case["expected_loss"] = float(f(zj))
    case["expected_gradient"] = np.asarray(jax.grad(f)(zj)).tolist()
    return case


def main():
    rng = np.random.default_rng(20240611)
    cases = [
        make_case(rng, "ntxent_small", "ntxent", 4, 5, 3, 0, False),
        make_case(rng, "ntxent_tau_half", "ntxent", 6, 3, 2, 0, False, tau=0.5),
        make_case(rng, "ntxent_single_pair", "ntxent", 1, 4, 1, 0, False),
        make_case(rng, "ccm_plain", "ccm", 6, 4, 3, 0, False),
        make_case(rng, "ccm_aux", "ccm", 6, 4, 2, 4, True, alpha=0.3, beta=1.2),
        make_case(rng, "mcl_plain", "mcl", 8, 6, 3, 0, False),
        make_case(rng, "mcl_plain_lambda", "mcl", 5, 3, 2, 0, False, alpha=0.5, lam=0.3, tau=0.35),
        make_case(rng, "mcl_aux", "mcl", 8, 5, 2, 4, True, alpha=0.2, beta=1.5),
        make_case(rng, "mcl_aux_degenerate", "mcl", 6, 4, 2, 2, True, alpha=5.0, beta=5.0, lam=0.0),
        make_case(rng, "supclr", "supclr", 7, 4, 3, 0, False),
        make_case(rng, "supclr_tau", "supclr", 5, 6, 2, 0, False, tau=0.7),
    ]
    OUT.parent.mkdir(parents=True, exist_ok=True)
    OUT.write_text(json.dumps({"cases": cases}, indent=1) + "\n")
    print(f"wrote {len(cases)} cases to {OUT}")


if __name__ == "__main__":
    main()
