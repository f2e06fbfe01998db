"""Command-line entry point: ``sgpnet <subcommand> ...``.

Failures print a single ``error: <kind>: <message>`` line on stderr and exit
with status 1; argparse usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import episodes as ep
from . import gm, io, oracle, props, spb
from . import tensor as tc


class CLIError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _outdir(path) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _as_batch(x: np.ndarray, ndim: int, what: str) -> np.ndarray:
    if x.ndim == ndim - 1:
        x = x[None]
    if x.ndim != ndim:
        raise CLIError("shape", f"{what} must have {ndim - 1} or {ndim} axes, got {x.shape}")
    return x


def _spectral_from_args(a) -> spb.SpectralParams:
    try:
        return spb.init_spectral_params(a.r1, a.r2, a.beta, k=a.k)
    except ValueError as exc:
        raise CLIError("config", str(exc)) from exc


def _gm_from_args(a, channels: int, k: int) -> gm.GMParams:
    try:
        return gm.init_gm_params(channels, k, a.sigma_a, a.s, a.q, a.t,
                                 geodesic=a.matcher == "geodesic")
    except ValueError as exc:
        raise CLIError("config", str(exc)) from exc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_spb_decompose(a) -> int:
    x = _as_batch(io.read_sgt(a.input), 4, "features")
    m = _as_batch(io.read_sgt(a.mask), 3, "mask")
    if m.shape[0] != x.shape[0]:
        raise CLIError("shape", f"mask batch {m.shape[0]} != feature batch {x.shape[0]}")
    sp = _spectral_from_args(a)
    out = spb.spb_forward(x, x, m, sp)
    bands = out.bands_q.value
    io.write_sgt(a.out, bands)
    if a.proto:
        io.write_sgt(a.proto, out.protos.value)
    if a.export_pgm:
        d = _outdir(a.export_pgm)
        for k in range(bands.shape[2]):
            mag = np.sqrt(np.sum(bands[0, :, k] ** 2, axis=0))
            io.write_pgm(d / f"band{k}.pgm", mag)
    print(json.dumps({"bands": list(bands.shape), "radii": sp.radii_values().tolist(),
                      "beta": sp.beta_value()}))
    return 0


def cmd_gm_match(a) -> int:
    bands = _as_batch(io.read_sgt(a.bands), 5, "bands")
    protos = _as_batch(io.read_sgt(a.protos), 3, "prototypes")
    fq = _as_batch(io.read_sgt(a.fq), 4, "query features")
    B, C, K = bands.shape[:3]
    if fq.shape[:2] != (B, C) or fq.shape[2:] != bands.shape[3:]:
        raise CLIError("shape", f"query features {fq.shape} do not match bands {bands.shape}")
    out = gm.gm_forward(fq, bands, protos, _gm_from_args(a, C, K))
    io.write_sgt(a.out, out.matched.value)
    if a.dump_maps:
        d = _outdir(a.dump_maps)
        w = out.weights.value
        for k in range(K):
            maps = {"cos": out.cos[k], "score": out.scores[:, k]}
            if out.seed:
                maps.update(seed=out.seed[k], geo=out.geo[k])
            for name, t in maps.items():
                io.write_pgm(d / f"{name}_band{k}.pgm", np.reshape(t.value[0], t.shape[-2:]))
            io.write_pgm(d / f"weight_band{k}.pgm", w[0, k])
    print(json.dumps({"matched": list(out.matched.shape)}))
    return 0


def cmd_oracle(a) -> int:
    try:
        fx = oracle.two_cluster_fixture(seed=a.seed)
    except oracle.FixtureError as exc:
        raise CLIError("fixture", str(exc)) from exc
    band = fx.band[None]
    cos = gm.cosine_map(band, fx.prototype[None]).value
    seed = gm.soft_seed(cos, a.q, a.s).value
    geo = gm.heat_diffuse(seed, gm.affinity8(band, a.sigma_a).value, a.t).value[0, 0]
    src = cos[0, 0] >= tc.quantile(cos[0, 0], a.q)
    dist = oracle.dijkstra_geo(fx.band, src)
    d = _outdir(a.out)
    for name, arr in {"band": fx.band, "cos": cos[0, 0], "geo": geo, "dijkstra": dist}.items():
        io.write_sgt(d / f"{name}.sgt", arr)
        if arr.ndim == 2:
            io.write_pgm(d / f"{name}.pgm", arr)
    summary = {"seed": a.seed, "A": list(fx.A), "B": list(fx.B),
               "cos_A": float(cos[0, 0][fx.A]), "cos_B": float(cos[0, 0][fx.B]),
               "geo_A": float(geo[fx.A]), "geo_B": float(geo[fx.B]),
               "dist_A": float(dist[fx.A]), "dist_B": float(dist[fx.B])}
    (d / "points.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps(summary))
    return 0


def _model_config(a) -> ep.ModelConfig:
    try:
        return ep.ModelConfig(k=a.k, t=a.t, sigma_a=a.sigma_a, s=a.s, q=a.q, r1=a.r1, r2=a.r2,
                              beta=a.beta, matcher=a.matcher)
    except ValueError as exc:
        raise CLIError("config", str(exc)) from exc


def cmd_train_toy(a) -> int:
    model = ep.ToyModel(_model_config(a), seed=a.seed)
    cfg = ep.TrainConfig(lr=a.lr, seed=a.seed, eval_every=a.eval_every, n_eval=a.n_eval)
    d = _outdir(a.out)
    with open(d / "metrics.jsonl", "w") as log:
        def on_log(row):
            log.write(ep.dumps(row) + "\n")
            if a.verbose:
                print(ep.dumps(row), file=sys.stderr)

        try:
            res = ep.train(model, a.iters, cfg=cfg, on_log=on_log)
        except ep.TrainingDiverged as exc:
            (d / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=1))
            raise CLIError("diverged", str(exc)) from exc
    with open(d / "radii.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "r1", "r2"])
        wr.writerows([(i, repr(r1), repr(r2)) for i, r1, r2 in res.radii])
    io.save_checkpoint(model.params(), d / "ckpt")
    (d / "config.json").write_text(json.dumps(
        {"model": ep.config_dict(model.config), "train": ep.config_dict(cfg),
         "iters": a.iters}, indent=1))
    last = res.metrics[-1]
    print(json.dumps({"iters": a.iters, "L_total": last["L_total"],
                      "r1": last["r1"], "r2": last["r2"]}))
    return 0


def cmd_ablate(a) -> int:
    axis_type = {"K": int, "T": int, "matcher": str}[a.axis]
    try:
        values = [axis_type(v) for v in a.values.split(",") if v.strip()]
    except ValueError as exc:
        raise CLIError("config", f"bad value list {a.values!r} for axis {a.axis}") from exc
    base = _model_config(a)
    tcfg = ep.TrainConfig(lr=a.lr, n_eval=a.n_eval)
    try:
        table = ep.ablate(a.axis, values, a.iters, range(a.seeds), base, tcfg)
    except ValueError as exc:
        raise CLIError("config", str(exc)) from exc
    for row in table:
        print(ep.dumps(row))
    return 0


def cmd_props(a) -> int:
    results = props.run_all(a.only.split(",") if a.only else None)
    if not results:
        raise CLIError("config", f"no property matches {a.only!r}")
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def gradcheck_episode_model(channels: int = 4, hidden: int = 4, episode_seed: int = 5,
                            model_seed: int = 1):
    """The frozen 16x16 episode and small-channel model used for end-to-end checks."""
    episode = ep.sample_episode(episode_seed, ep.SMALL_FAMILY)
    model = ep.ToyModel(ep.ModelConfig(channels=channels, decoder_hidden=hidden), seed=model_seed)
    return episode, model


def cmd_gradcheck(a) -> int:
    episode, model = gradcheck_episode_model(a.channels, a.hidden, a.episode_seed, a.seed)
    t0 = time.perf_counter()
    rep = ag.gradcheck(lambda: ep.episode_losses(model, episode)["L_total"], model.params(),
                       eps=a.eps, max_elements=a.max_elements, seed=a.seed)
    for chk in rep.checks:
        status = "SKIP" if chk.skipped else ("PASS" if chk.max_rel_error <= a.tol else "FAIL")
        print(f"{status} {chk.name}: max_rel_error={chk.max_rel_error:.3e} checked={chk.n_checked}")
    print(json.dumps({"max_rel_error": rep.max_error(), "seconds": time.perf_counter() - t0}))
    return 0 if rep.passed(a.tol) else 1


def cmd_export_maps(a) -> int:
    """Low/mid/high band activation overlays for one phantom episode."""
    cfg = _model_config(a)
    if cfg.k != 3:
        raise CLIError("config", "export-maps needs k=3 (low, mid, high)")
    model = ep.ToyModel(cfg, seed=a.seed)
    if a.ckpt:
        try:
            io.load_checkpoint(model.params(), a.ckpt)
        except (OSError, io.FormatError) as exc:
            raise CLIError("checkpoint", str(exc)) from exc
    episode = ep.sample_episode(a.episode_seed)
    _, diag = ep.episode_forward(model, episode)
    scores = diag["fg"].scores.value[0]
    image = episode.I_q[0, 0]
    H, W = image.shape
    d = _outdir(a.out)
    span = np.ptp(image) or 1.0
    base = (image - image.min()) / span
    for k, name in enumerate(("low", "mid", "high")):
        heat = tc.resize_bilinear(scores[k], (H, W))
        hspan = np.ptp(heat) or 1.0
        overlay = 0.5 * base + 0.5 * (heat - heat.min()) / hspan
        io.write_pgm(d / f"{name}.pgm", overlay)
    print(json.dumps({"out": str(d), "maps": ["low.pgm", "mid.pgm", "high.pgm"]}))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_spectral(p):
    p.add_argument("--k", type=int, default=3, help="number of bands (1..5)")
    p.add_argument("--r1", type=float, default=0.25)
    p.add_argument("--r2", type=float, default=0.55)
    p.add_argument("--beta", type=float, default=10.0)


def _add_matcher(p):
    p.add_argument("--t", type=int, default=5, help="diffusion steps")
    p.add_argument("--sigma-a", type=float, default=0.5)
    p.add_argument("--s", type=float, default=20.0)
    p.add_argument("--q", type=float, default=0.85)
    p.add_argument("--matcher", choices=("geodesic", "cosine"), default="geodesic")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgpnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spb-decompose", help="split features into radial frequency bands")
    p.add_argument("--in", dest="input", required=True, help="features [B,]C,h,w (SGT)")
    p.add_argument("--mask", required=True, help="support mask [B,]H,W (SGT)")
    p.add_argument("--out", required=True, help="bands [B,C,K,h,w] (SGT)")
    p.add_argument("--proto", help="prototypes [B,C,K] (SGT)")
    p.add_argument("--export-pgm", help="directory for per-band magnitude maps")
    _add_spectral(p)
    p.set_defaults(func=cmd_spb_decompose)

    p = sub.add_parser("gm-match", help="geodesic matching of query bands to prototypes")
    p.add_argument("--bands", required=True)
    p.add_argument("--protos", required=True)
    p.add_argument("--fq", required=True, help="raw query features [B,]C,h,w (SGT)")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-maps", help="directory for cos/seed/geo/score/weight PGMs")
    _add_matcher(p)
    p.set_defaults(func=cmd_gm_match)

    p = sub.add_parser("oracle", help="oracle fixtures")
    p.add_argument("which", choices=("fixture",))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_matcher(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train-toy", help="episodic training on synthetic phantoms")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--eval-every", type=int, default=100)
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--out", required=True)
    _add_spectral(p)
    _add_matcher(p)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("ablate", help="train one model per (value, seed)")
    p.add_argument("--axis", choices=sorted(ep.AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--n-eval", type=int, default=16)
    _add_spectral(p)
    _add_matcher(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("props", help="run the invariant suite")
    p.add_argument("--only", help="comma-separated property names")
    p.set_defaults(func=cmd_props)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--episode-seed", type=int, default=5)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--max-elements", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-maps", help="low/mid/high activation overlays as PGM")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episode-seed", type=int, default=0)
    p.add_argument("--ckpt", help="checkpoint directory from train-toy")
    _add_spectral(p)
    _add_matcher(p)
    p.set_defaults(func=cmd_export_maps)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        kind, msg = exc.kind, str(exc)
    except io.FormatError as exc:
        kind, msg = "format", str(exc)
    except tc.ShapeError as exc:
        kind, msg = "shape", str(exc)
    except FileNotFoundError as exc:
        kind, msg = "io", f"{exc.filename}: not found"
    except OSError as exc:
        kind, msg = "io", str(exc)
    except ValueError as exc:
        kind, msg = "value", str(exc)
    msg = " ".join(msg.split())
    print(f"error: {kind}: {msg}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
