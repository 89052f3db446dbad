"""Command-line entry point: ``patchprior <command> ...``.

Commands read a JSON run config and write into an output directory; every
output directory receives ``config.json`` (the echoed config, seed applied)
and a ``report.json``.  Exit codes: 0 success, 2 config/usage, 3 numerical
failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import alr, flow, gmm, ot
from .errors import FormatError, InvalidArgumentError, NumericalError, PatchPriorError
from .forward_models import (
    Equality,
    GaussianL2,
    InpaintModel,
    PoissonCT,
    RadonModel,
    SuperResModel,
    ellipse_phantom,
    simulate_observation,
)
from .imagecore import (
    DiscreteMeasure,
    PatchConfig,
    extract_patches,
    load_checkpoint,
    load_image,
    read_raw,
    save_checkpoint,
    write_raw,
)
from .metrics import psnr, ssim
from .regularizers import (
    AlrRegularizer,
    EntropicRegularizer,
    EpllRegularizer,
    PatchNRRegularizer,
    WppRegularizer,
)
from .solvers import MapConfig, ReconProblem, UlaConfig, inpaint_map, map_reconstruct, posterior_stats, ula_sample

log = logging.getLogger("patchprior")

SCHEMA_VERSION = 1
TASKS = ("ct", "sr", "inpaint", "zero-shot-sr")
PRIORS = ("epll", "patchnr", "alr", "wpp", "wpp_eps", "wpp_eps_rho")
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class ConfigError(InvalidArgumentError):
    pass


# ---------------------------------------------------------------------------
# config helpers


def _load_config(path, seed=None) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError:
        raise
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema {cfg.get('schema')!r}")
    cfg["schema"] = SCHEMA_VERSION
    if seed is not None:
        cfg["seed"] = seed
    cfg.setdefault("seed", 0)
    # relative paths resolve against base_dir when present, else the config's folder
    base = cfg.get("base_dir") or str(Path(path).resolve().parent)
    cfg["base_dir"] = cfg["_base"] = str(base)
    return cfg


def _path(cfg, key, required=True):
    val = cfg.get(key)
    if val is None:
        if required:
            raise ConfigError(f"config is missing {key!r}")
        return None
    p = Path(val)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _enum(cfg, key, allowed, default=None):
    val = cfg.get(key, default)
    if val not in allowed:
        raise ConfigError(f"schema error: {key}={val!r} is not one of {list(allowed)}")
    return val


def _echo(cfg, out: Path):
    clean = {k: v for k, v in cfg.items() if not k.startswith("_")}
    (out / "config.json").write_text(json.dumps(clean, indent=1, sort_keys=True))


def _report(out: Path, report: dict):
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))


def _patch_cfg(d) -> PatchConfig:
    return PatchConfig.from_dict(d) if d else PatchConfig()


def _forward(task, fwd: dict, shape, cfg):
    if task == "ct":
        return RadonModel(
            shape[0],
            n_angles=int(fwd.get("n_angles", 60)),
            n_detectors=fwd.get("n_detectors"),
            angle_range=tuple(fwd.get("angle_range", (0.0, math.pi))),
            side=float(fwd.get("side", 0.26)),
        )
    if task in ("sr", "zero-shot-sr"):
        std = float(fwd.get("std", 1.0 if task == "zero-shot-sr" else 2.0))
        return SuperResModel(shape, int(fwd.get("factor", 2)), std=std, kernel_size=int(fwd.get("kernel_size", 16)))
    if task == "inpaint":
        if fwd.get("mask"):
            mask = load_image(_path(fwd, "mask"))
        else:
            mask = _make_mask(fwd.get("mask_spec", {"kind": "box"}), shape, cfg["seed"])
        return InpaintModel((mask > 0.5).astype(float))
    raise ConfigError(f"unknown task {task!r}")


def _make_mask(spec, shape, seed):
    mask = np.ones(shape)
    kind = spec.get("kind", "box")
    if kind == "box":
        H, W = shape
        r0, r1 = spec.get("rows", [H // 3, 2 * H // 3])
        c0, c1 = spec.get("cols", [W // 3, 2 * W // 3])
        mask[r0:r1, c0:c1] = 0.0
    elif kind == "random":
        rng = np.random.default_rng(seed)
        mask = (rng.uniform(size=shape) >= float(spec.get("missing", 0.5))).astype(float)
    else:
        raise ConfigError(f"unknown mask kind {kind!r}")
    return mask


def _data_term(task, spec: dict):
    if task == "ct":
        return PoissonCT(float(spec.get("N0", 4096.0)), float(spec.get("mu", 81.35858)))
    if task == "inpaint":
        return Equality()
    return GaussianL2(float(spec.get("sigma", 1.0)))


# ---------------------------------------------------------------------------
# fit-prior


def _training_images(cfg):
    refs = cfg.get("references")
    if refs:
        return [load_image(_path({"p": r, "_base": cfg["_base"]}, "p")) for r in refs]
    if cfg.get("source") == "observation":
        obs = load_image(_path(cfg, "observation"))
        mask_path = _path(cfg, "mask", required=False)
        if mask_path is not None:
            # inpainting: keep only fully observed patches later
            return [obs], load_image(mask_path)
        return [obs]
    raise ConfigError("fit-prior needs 'references' or source='observation'")


def cmd_fit_prior(cfg, out: Path) -> dict:
    prior = _enum(cfg, "prior", PRIORS)
    pcfg = _patch_cfg(cfg.get("patch"))
    imgs = _training_images(cfg)
    mask = None
    if isinstance(imgs, tuple):
        imgs, mask = imgs
    vecs = []
    for img in imgs:
        ps = extract_patches(img, pcfg, rng=np.random.default_rng(cfg["seed"]))
        v = ps.vectors
        if mask is not None:
            mps = extract_patches(mask, PatchConfig(pcfg.size, pcfg.stride), rng=None)
            full = {tuple(o) for o, m in zip(mps.origins, mps.vectors) if m.min() > 0.5}
            keep = np.array([tuple(o) in full for o in ps.origins])
            v = v[keep]
        vecs.append(v)
    X = np.concatenate(vecs, axis=0)
    if len(X) == 0:
        raise ConfigError("no training patches")
    meta = {"prior": prior, "patch": pcfg.to_dict(), "n_patches": int(len(X)), "seed": cfg["seed"]}
    ckpt = out / "prior"
    report = {"prior": prior, "n_patches": int(len(X))}
    hp = cfg.get("hyper", {})
    if prior == "epll":
        em_cfg = gmm.EmConfig(K=int(hp.get("K", 50)), max_iters=int(hp.get("max_iters", 200)),
                              tol=float(hp.get("tol", 1e-6)), seed=cfg["seed"])
        model = gmm.em_fit(X, em_cfg)
        meta["loglik"] = float(gmm.gmm_logpdf(model, X).mean())
        model.save(ckpt, meta)
        report["loglik"] = meta["loglik"]
    elif prior == "patchnr":
        fh = flow.FlowHyper(**{k: hp[k] for k in hp if k in flow.FlowHyper.__dataclass_fields__})
        model = flow.train_flow(X, fh, seed=cfg["seed"])
        meta["final_loss"] = model.final_loss
        model.save(ckpt, meta)
        report["final_loss"] = model.final_loss
    elif prior == "alr":
        deg_cfg = cfg.get("degraded")
        if not deg_cfg:
            raise ConfigError("alr needs a 'degraded' block (task, observation, forward)")
        deg_cfg = dict(deg_cfg, _base=cfg["_base"], seed=cfg["seed"])
        obs = load_image(_path(deg_cfg, "observation"))
        task = _enum(deg_cfg, "task", TASKS)
        shape = tuple(deg_cfg.get("shape") or _image_shape(_path(deg_cfg, "observation"), obs))
        F = _forward(task, dict(deg_cfg.get("forward", {}), _base=cfg["_base"]), shape, deg_cfg)
        fake = alr.degraded_patch_source(obs, F, pcfg).vectors
        acfg = alr.AlrTrainConfig(**{k: (tuple(v) if k == "hidden" else v) for k, v in hp.items()
                                     if k in alr.AlrTrainConfig.__dataclass_fields__} | {"seed": cfg["seed"]})
        D = alr.train_alr(X, fake, acfg)
        meta["final_gap"] = D.final_gap
        D.save(ckpt, meta)
        report["final_gap"] = D.final_gap
    else:
        meta.update({k: hp[k] for k in ("eps", "rho", "steps", "lr") if k in hp})
        save_checkpoint(ckpt, "measure", meta, {"points": X, "weights": np.full(len(X), 1.0 / len(X))})
    return report


def _image_shape(path, arr):
    try:
        _, meta = read_raw(path, with_meta=True)
        if "image_shape" in meta:
            return tuple(meta["image_shape"])
    except (FormatError, OSError):
        pass
    return arr.shape


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(cfg, out: Path) -> dict:
    task = _enum(cfg, "task", TASKS)
    gt_path = _path(cfg, "ground_truth", required=False)
    x = load_image(gt_path) if gt_path is not None else ellipse_phantom(int(cfg.get("phantom_size", 64)))
    fwd = cfg.get("forward", {})
    F = _forward(task, dict(fwd, _base=cfg["_base"]), x.shape, cfg)
    noise_spec = cfg.get("noise", {})
    if task == "ct":
        noise = PoissonCT(float(noise_spec.get("N0", 4096.0)), float(noise_spec.get("mu", 81.35858)))
    elif task == "inpaint":
        noise = None
    else:
        noise = float(noise_spec.get("sigma", 0.01))
    y = simulate_observation(F, x, noise, seed=cfg["seed"])
    extra = {"task": task, "image_shape": list(x.shape)}
    kind = "sinogram" if task == "ct" else "image"
    if task == "ct":
        extra.update(angles=F.angles.tolist(), n_detectors=F.n_detectors)
    write_raw(y, out / "observation.raw", kind=kind, extra=extra)
    write_raw(x, out / "ground_truth.raw")
    report = {"task": task, "observation": "observation.raw", "ground_truth": "ground_truth.raw"}
    if task == "inpaint":
        write_raw(F.mask, out / "mask.raw", kind="mask")
        report["mask"] = "mask.raw"
    if task == "ct":
        clean = F.apply(x)
        nz = np.abs(clean) > 1e-3 * np.abs(clean).max()
        report["mean_relative_perturbation"] = float(np.mean(np.abs(y[nz] - clean[nz]) / np.abs(clean[nz])))
    return report


# ---------------------------------------------------------------------------
# reconstruct / sample


def _load_prior(spec: dict, base: str, expected_patch=None):
    name = spec.get("name")
    if name not in PRIORS:
        raise ConfigError(f"schema error: prior name {name!r} is not one of {list(PRIORS)}")
    path = Path(spec["checkpoint"]) if Path(spec["checkpoint"]).is_absolute() else Path(base) / spec["checkpoint"]
    kind, meta, _ = load_checkpoint(path)
    pcfg = PatchConfig.from_dict(meta["patch"])
    if expected_patch is not None:
        exp = PatchConfig.from_dict(expected_patch)
        if exp.size != pcfg.size:
            raise ConfigError(
                f"patch size mismatch: checkpoint patches have dim {pcfg.dim} ({pcfg.size}x{pcfg.size}), "
                f"run config asks for dim {exp.dim} ({exp.size}x{exp.size})"
            )
        pcfg = exp
    if name == "epll":
        return EpllRegularizer(gmm.GmmModel.load(path)[0], pcfg)
    if name == "patchnr":
        return PatchNRRegularizer(flow.FlowModel.load(path)[0], pcfg)
    if name == "alr":
        return AlrRegularizer(alr.Discriminator.load(path)[0], pcfg)
    _, meta, arrays = load_checkpoint(path, kind="measure")
    ref = DiscreteMeasure(arrays["points"], arrays["weights"] / arrays["weights"].sum())
    seed = int(spec.get("seed", 0))
    if name == "wpp":
        wcfg = ot.WppConfig(pcfg, steps=int(spec.get("steps", meta.get("steps", 50))),
                            lr=float(spec.get("lr", meta.get("lr", 1.0))), seed=seed)
        return WppRegularizer(ref, wcfg)
    eps = float(spec.get("eps", meta.get("eps", 1e-2)))
    rho = float(spec.get("rho", meta.get("rho", 1.0))) if name == "wpp_eps_rho" else math.inf
    scfg = ot.SinkhornConfig(eps, rho, max_iter=int(spec.get("max_iter", 1000)), tol=float(spec.get("tol", 1e-6)))
    return EntropicRegularizer(ref, ot.EntropicPatchConfig(pcfg, scfg, seed=seed))


def _problem(cfg):
    task = _enum(cfg, "task", TASKS)
    obs_path = _path(cfg, "observation")
    y = load_image(obs_path)
    shape = tuple(cfg.get("shape") or _image_shape(obs_path, y))
    fwd = dict(cfg.get("forward", {}), _base=cfg["_base"])
    if task == "inpaint" and "mask" not in fwd and cfg.get("mask"):
        fwd["mask"] = cfg["mask"]
    F = _forward(task, fwd, shape, cfg)
    term = _data_term(task, cfg.get("data_term", {}))
    weight = float(cfg.get("weight", 0.0))
    reg = None
    if "prior" in cfg and cfg["prior"]:
        reg = _load_prior(cfg["prior"], cfg["_base"], cfg.get("patch"))
    return task, F, y, ReconProblem(F, term, reg, weight)


def _ground_truth(cfg):
    p = _path(cfg, "ground_truth", required=False)
    return None if p is None else load_image(p)


def cmd_reconstruct(cfg, out: Path) -> dict:
    task, F, y, problem = _problem(cfg)
    sol = cfg.get("solver", {})
    default_init = {"ct": "fbp", "inpaint": "zero-fill"}.get(task, "bicubic")
    mcfg = MapConfig(iterations=int(sol.get("iterations", 300)), lr=float(sol.get("lr", 1e-2)),
                     init=sol.get("init", default_init), seed=cfg["seed"],
                     check_gradient=bool(sol.get("check_gradient", True)), clip=bool(sol.get("clip", False)))
    if task == "inpaint":
        x = inpaint_map(problem, y, F.mask, mcfg)
        trace = []
    else:
        x, trace = map_reconstruct(problem, y, mcfg)
    write_raw(x, out / "reconstruction.raw")
    report = {"objective_trace": [float(v) for v in trace], "reconstruction": "reconstruction.raw"}
    gt = _ground_truth(cfg)
    if gt is not None:
        report["psnr"] = psnr(gt, x)
        report["ssim"] = ssim(gt, x) if min(gt.shape) >= 11 else None
    return report


def cmd_sample(cfg, out: Path) -> dict:
    task, F, y, problem = _problem(cfg)
    u = cfg.get("ula", {})
    ucfg = UlaConfig(delta=float(u.get("delta", 1e-4)), burn_in=int(u.get("burn_in", 1000)),
                     n_samples=int(u.get("n_samples", 100)), thin=int(u.get("thin", 10)),
                     clip=bool(u.get("clip", problem.regularizer is not None and problem.regularizer.name == "alr")),
                     seed=cfg["seed"])
    samples = ula_sample(problem, y, ucfg)
    sdir = out / "samples"
    sdir.mkdir(exist_ok=True)
    for i, s in enumerate(samples):
        write_raw(s, sdir / f"sample_{i:04d}.raw", kind="sample", extra={"index": i})
    mean, std = posterior_stats(samples)
    write_raw(mean, out / "mean.raw")
    write_raw(std, out / "std.raw")
    return {"n_samples": len(samples), "mean": "mean.raw", "std": "std.raw", "samples": "samples/"}


# ---------------------------------------------------------------------------
# ot / metrics


def _read_measure_csv(path) -> DiscreteMeasure:
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    except ValueError as exc:
        raise FormatError(f"cannot parse measure CSV {path}: {exc}") from exc
    if data.shape[1] < 2:
        raise FormatError(f"{path}: rows must hold coordinates followed by a weight")
    return DiscreteMeasure.normalized(data[:, :-1], data[:, -1])


def cmd_ot(args) -> dict:
    mu, nu = _read_measure_csv(args.mu), _read_measure_csv(args.nu)
    C = ot.cost_matrix(mu.points, nu.points)
    if args.exact:
        value, plan = ot.w2_exact_small(mu, nu)
        result = {"value": value, "iterations": None, "converged": True}
    else:
        rho = math.inf if args.rho is None else args.rho
        scfg = ot.SinkhornConfig(args.eps, rho, max_iter=args.max_iter, tol=args.tol)
        pots = ot.sinkhorn(mu, nu, scfg)
        value = ot.sinkhorn_value(mu, nu, pots, scfg)
        plan = ot.plan_from_potentials(pots.phi, pots.psi, C, scfg.eps, mu.weights, nu.weights)
        result = {"value": value, "iterations": pots.n_iter, "converged": pots.converged}
    result["plan_path"] = None
    if args.plan:
        np.savetxt(args.plan, plan, delimiter=",")
        result["plan_path"] = str(args.plan)
    return result


def cmd_metrics(args, stream) -> None:
    ref = load_image(args.reference)
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(["path", "psnr", "ssim"])
    for p in args.images:
        img = load_image(p)
        s = ssim(ref, img, data_range=args.max_val) if min(ref.shape) >= 11 else float("nan")
        w.writerow([p, f"{psnr(ref, img, args.max_val):.6f}", f"{s:.6f}"])


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchprior", description="Patch-based priors for imaging inverse problems.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("fit-prior", "simulate", "reconstruct", "sample"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p = sub.add_parser("ot", help="transport between two CSV measures (coords..., weight per row)")
    p.add_argument("--mu", required=True)
    p.add_argument("--nu", required=True)
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--exact", action="store_true", help="exact W2^2 instead of Sinkhorn")
    p.add_argument("--max-iter", type=int, default=100_000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--plan", default=None, help="write the plan as CSV here")
    p = sub.add_parser("metrics")
    p.add_argument("--reference", required=True)
    p.add_argument("--max-val", type=float, default=1.0)
    p.add_argument("images", nargs="+")
    return ap


RUNNERS = {"fit-prior": cmd_fit_prior, "simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "sample": cmd_sample}


def main(argv=None, stdout=None) -> int:
    stdout = sys.stdout if stdout is None else stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "ot":
            stdout.write(json.dumps(cmd_ot(args), sort_keys=True) + "\n")
        elif args.command == "metrics":
            cmd_metrics(args, stdout)
        else:
            cfg = _load_config(args.config, args.seed)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            report = RUNNERS[args.command](cfg, out)
            _echo(cfg, out)
            _report(out, report)
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"patchprior: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"patchprior: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (FormatError, OSError) as exc:
        print(f"patchprior: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PatchPriorError as exc:
        print(f"patchprior: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
