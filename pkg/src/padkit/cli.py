"""Command-line surface tying the pipeline stages together.

Subcommands: normalize, build-map, phantoms, train, generate,
eval {ccc,cov,radiomics,js,tumor-task}, schedule-dump, study {serve,report}.
Exit codes: 0 success, 1 validation error, 2 runtime error. Unknown
flags are rejected rather than ignored.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import activity, denoiser, diffusion, imagekit, radiomics, stats, tensorio, tumor
from .imagekit import InvalidParameterError, LabelGrid2D, ScalarGrid2D, ShapeError


class CliValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of sys.exit so exit codes stay ours."""

    def error(self, message):
        raise CliValidationError(message)


_VALIDATION_ERRORS = (
    CliValidationError,
    InvalidParameterError,
    ShapeError,
    tensorio.FormatError,
    tensorio.ConfigError,
    radiomics.InsufficientDataError,
)


def _read_value_csv(path: str) -> dict[str, float]:
    """id,value rows keyed by id."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "id" not in rows[0] or "value" not in rows[0]:
        raise CliValidationError(f"{path}: expected a CSV with 'id' and 'value' columns")
    return {r["id"]: float(r["value"]) for r in rows}


def _read_case_list(path: str, columns: tuple[str, ...]) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliValidationError(f"{path}: empty case list")
    for col in columns:
        if col not in rows[0]:
            raise CliValidationError(f"{path}: missing column {col!r}")
    return rows


def _paired_from_csvs(pred_path: str, ref_path: str) -> stats.PairedSample:
    pred = _read_value_csv(pred_path)
    ref = _read_value_csv(ref_path)
    shared = sorted(set(pred) & set(ref))
    if len(shared) < 2:
        raise CliValidationError("need at least 2 shared case ids")
    return stats.PairedSample(np.array([ref[k] for k in shared]),
                              np.array([pred[k] for k in shared]))


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_normalize(args) -> int:
    grid = tensorio.read_scalar(args.infile)
    params = imagekit.NormalizationParams.from_suv_cap(suv_cap=args.suv_cap, c=args.c)
    if grid.unit == imagekit.UNIT_RAW:
        if args.weight_g is None or args.dose_bq is None:
            raise CliValidationError("raw input needs --weight-g and --dose-bq")
        grid = imagekit.to_suv(grid, args.weight_g, args.dose_bq)
    out = imagekit.arcsinh_normalize(grid, params)
    tensorio.write_tensor(out, args.out)
    with open(str(args.out) + ".norm.json", "w") as fh:
        json.dump(params.to_dict(), fh)
    print(f"normalized {args.infile} -> {args.out} (c={params.c}, lo={params.lo}, hi={params.hi})")
    return 0


def _cmd_build_map(args) -> int:
    pet = tensorio.read_scalar(args.pet)
    labels = tensorio.read_labels(args.labels)
    stats_list = activity.organ_means(pet, labels)
    grid = activity.build_uniform_map(labels, stats_list, background=args.background)
    tensorio.write_tensor(grid, args.out)
    if args.stats_csv:
        activity.organ_stats_to_csv(stats_list, args.stats_csv)
    print(f"uniform map with {len(stats_list)} organs -> {args.out}")
    return 0


def _cmd_phantoms(args) -> int:
    cfg = tensorio.RunConfig.from_file(args.config)
    n = args.n if args.n is not None else cfg.phantoms.count
    seed = args.seed if args.seed is not None else cfg.phantoms.seed
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        pc = activity.PhantomConfig(
            grid_size=cfg.phantoms.grid_size,
            organ_count=cfg.phantoms.organ_count,
            suv_range=(cfg.phantoms.suv_lo, cfg.phantoms.suv_hi),
            texture=tumor.LumpyParams(mean_lump_count=cfg.phantoms.mean_lump_count,
                                      lump_sigma=cfg.phantoms.lump_sigma, magnitude=1.0),
            texture_fraction=cfg.phantoms.texture_fraction,
            seed=seed + i,
        )
        labels, target, umap = activity.synth_phantom(pc)
        stem = outdir / f"case_{i:04d}"
        tensorio.write_tensor(labels, str(stem) + ".labels")
        tensorio.write_tensor(target, str(stem) + ".target")
        tensorio.write_tensor(umap, str(stem) + ".map")
    print(f"wrote {n} phantom cases to {outdir}")
    return 0


def _load_phantom_dir(data_dir: str, norm: imagekit.NormalizationParams):
    """Normalized (map, target) pairs plus labels from a phantom directory."""
    stems = sorted(p.name[:-len(".map.json")] for p in Path(data_dir).glob("*.map.json"))
    if not stems:
        raise CliValidationError(f"{data_dir}: no phantom cases found")
    cases = []
    for stem in stems:
        base = str(Path(data_dir) / stem)
        umap = imagekit.arcsinh_normalize(tensorio.read_scalar(base + ".map"), norm)
        target = imagekit.arcsinh_normalize(tensorio.read_scalar(base + ".target"), norm)
        labels = tensorio.read_labels(base + ".labels")
        cases.append((stem, umap.values, target.values, labels))
    return cases


def _phase_settings_to_config(ps: tensorio.PhaseSettings, phase: str) -> denoiser.TrainConfig:
    return denoiser.TrainConfig(
        phase=phase, iterations=ps.iterations, initial_lr=ps.initial_lr,
        freeze_iters=ps.freeze_iters, batch_size=ps.batch_size,
        weights=diffusion.LossWeights(lambda_vb=ps.lambda_vb, lambda_l1=ps.lambda_l1),
        schedule_kind=ps.schedule_kind, T=ps.T, ema_decay=ps.ema_decay, seed=ps.seed,
        importance_sampling=ps.importance_sampling, deterministic=ps.deterministic,
        precision=ps.precision,
    )


def _cmd_train(args) -> int:
    cfg = tensorio.RunConfig.from_file(args.config)
    phase = denoiser.PHASE_BASE if args.phase == "base" else denoiser.PHASE_SUPER
    settings = cfg.base if phase == denoiser.PHASE_BASE else cfg.super_res
    tc = _phase_settings_to_config(settings, phase)
    if args.seed is not None:
        tc = denoiser.TrainConfig(**{**tc.__dict__, "seed": args.seed})
    cases = _load_phantom_dir(args.data, cfg.normalization)
    dataset = [(m, x) for _, m, x, _ in cases]
    trained = denoiser.train_phase(tc, dataset)
    denoiser.save_phase(args.out, trained)
    denoiser.trace_to_csv(trained.trace, args.out + ".trace.csv")
    last = trained.trace[-1] if trained.trace else None
    print(f"trained {args.phase} phase for {tc.iterations} iterations"
          + (f", final total loss {last.total:.4f}" if last else ""))
    return 0


def _cmd_generate(args) -> int:
    base = denoiser.load_phase(args.base)
    sr = denoiser.load_phase(args.super)
    with open(args.params) as fh:
        norm = imagekit.NormalizationParams.from_dict(json.load(fh))
    umap = tensorio.read_scalar(args.map)
    if umap.unit == imagekit.UNIT_SUV:
        umap = imagekit.arcsinh_normalize(umap, norm)
    rng = np.random.default_rng(args.seed)
    sample01 = denoiser.generate(base, sr, umap.values, rng)
    out = imagekit.denormalize(ScalarGrid2D(sample01, unit=imagekit.UNIT_NORM), norm)
    tensorio.write_tensor(out, args.out)
    print(f"generated {args.out} from {args.map} (seed {args.seed})")
    return 0


def _cmd_eval_ccc(args) -> int:
    pair = _paired_from_csvs(args.pred, args.ref)
    ccc = stats.lin_ccc(pair)
    slope, intercept, r = stats.linreg(pair)
    print(f"CCC {ccc:.6g}")
    print(f"slope {slope:.6g} intercept {intercept:.6g} r {r:.6g}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value", "p", "ci_lo", "ci_hi"])
            for name, val in (("ccc", ccc), ("slope", slope),
                              ("intercept", intercept), ("r", r)):
                w.writerow([name, repr(float(val)), "", "", ""])
    return 0


def _cmd_eval_cov(args) -> int:
    rows = _read_case_list(args.images, ("id", "image", "labels"))
    out_rows = []
    for row in rows:
        img = tensorio.read_scalar(row["image"])
        labels = tensorio.read_labels(row["labels"])
        mask = labels.labels == args.label
        if not mask.any():
            raise CliValidationError(f"case {row['id']}: label {args.label} absent")
        out_rows.append((row["id"], stats.cov_metric(img.values[mask])))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "value"])
        for cid, value in out_rows:
            w.writerow([cid, repr(float(value))])
    print(f"wrote CoV for {len(out_rows)} cases -> {args.out}")
    return 0


def _cmd_eval_radiomics(args) -> int:
    rows = _read_case_list(args.images, ("id", "image", "labels"))
    cfg = radiomics.GlcmConfig(bin_count=args.bins)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "region", "feature", "value"])
        for row in rows:
            img = tensorio.read_scalar(row["image"])
            labels = tensorio.read_labels(row["labels"])
            organ_ids = [args.label] if args.label else [int(x) for x in labels.present_labels()]
            for lab in organ_ids:
                mask = labels.labels == lab
                if not mask.any():
                    continue
                for name, value in radiomics.all_features(img.values, mask, cfg):
                    w.writerow([row["id"], lab, name, repr(float(value))])
    print(f"wrote radiomics features for {len(rows)} cases -> {args.out}")
    return 0


def _cmd_eval_js(args) -> int:
    a = np.array(list(_read_value_csv(args.a).values()))
    b = np.array(list(_read_value_csv(args.b).values()))
    print(f"JS distance {stats.js_distance(a, b):.6g}")
    return 0


def _cmd_eval_tumor_task(args) -> int:
    rows = _read_case_list(args.pairs, ("id", "pred", "ref", "labels"))
    rng = np.random.default_rng(args.seed)
    dice_diffs, rvd_diffs = [], []
    out_rows = []
    for row in rows:
        pred = tensorio.read_scalar(row["pred"])
        ref = tensorio.read_scalar(row["ref"])
        labels = tensorio.read_labels(row["labels"])
        roi = LabelGrid2D((labels.labels == args.roi_label).astype(np.int32))
        spec = tumor.sample_tumor_spec(roi, rng)
        seed_case = int(rng.integers(0, 2 ** 31))
        pred_img, true_mask = tumor.insert_tumor(pred, spec, np.random.default_rng(seed_case))
        ref_img, _ = tumor.insert_tumor(ref, spec, np.random.default_rng(seed_case))
        search = LabelGrid2D(true_mask.labels)  # segment inside the known extent
        seg_pred = tumor.threshold_segment(pred_img, search, args.fraction)
        seg_ref = tumor.threshold_segment(ref_img, search, args.fraction)
        d_pred = stats.dice(seg_pred.labels, true_mask.labels)
        d_ref = stats.dice(seg_ref.labels, true_mask.labels)
        r_pred = stats.rvd(seg_pred.labels, true_mask.labels)
        r_ref = stats.rvd(seg_ref.labels, true_mask.labels)
        dice_diffs.append(d_pred - d_ref)
        rvd_diffs.append(r_pred - r_ref)
        out_rows.append([row["id"], d_pred, d_ref, r_pred, r_ref, spec.to_json()])
    _, p_dice = stats.wilcoxon_signed_rank(np.array(dice_diffs))
    _, p_rvd = stats.wilcoxon_signed_rank(np.array(rvd_diffs))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "dice_pred", "dice_ref", "rvd_pred", "rvd_ref", "tumor_spec"])
        for r in out_rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:5]] + [r[5]])
    print(f"DICE diff mean {np.mean(dice_diffs):.4g}, Wilcoxon p {p_dice:.4g}")
    print(f"RVD  diff mean {np.mean(rvd_diffs):.4g}, Wilcoxon p {p_rvd:.4g}")
    return 0


def _cmd_schedule_dump(args) -> int:
    kind = {"cosine": diffusion.SCHEDULE_COSINE,
            "squared_cosine": diffusion.SCHEDULE_COSINE,
            "linear": diffusion.SCHEDULE_LINEAR}.get(args.kind)
    if kind is None:
        raise CliValidationError(f"unknown schedule kind {args.kind!r}")
    schedule = diffusion.make_schedule(kind, args.T)
    diffusion.schedule_to_csv(schedule, args.out)
    print(f"wrote {args.T}-row schedule ({kind}) -> {args.out}")
    return 0


def _cmd_study_serve(args) -> int:
    import uvicorn

    from .study import StudyStore, create_app

    app = create_app(StudyStore(args.store))
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def _cmd_study_report(args) -> int:
    from .study import StudyStore

    store = StudyStore(args.store)
    store.summary_csv(args.out)
    summary = store.summarize()
    for row in summary["rows"] + [summary["overall"]]:
        print(f"{row['observer_id']}: accuracy {row['accuracy_display']}%, "
              f"median confidence {row['median_confidence']:g}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="padkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("normalize", help="convert to SUV and arcsinh-normalize")
    sp.add_argument("--in", dest="infile", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--c", type=float, default=imagekit.DEFAULT_SUV_THRESHOLD)
    sp.add_argument("--suv-cap", type=float, default=imagekit.DEFAULT_SUV_CAP)
    sp.add_argument("--weight-g", type=float, default=None)
    sp.add_argument("--dose-bq", type=float, default=None)
    sp.set_defaults(fn=_cmd_normalize)

    sp = sub.add_parser("build-map", help="uniform activity map from PET + labels")
    sp.add_argument("--pet", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--background", type=float, default=0.0)
    sp.add_argument("--stats-csv", default=None)
    sp.set_defaults(fn=_cmd_build_map)

    sp = sub.add_parser("phantoms", help="generate synthetic training cases")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=_cmd_phantoms)

    sp = sub.add_parser("train", help="train one diffusion phase")
    sp.add_argument("--phase", choices=("base", "super"), required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("generate", help="two-stage generation from a uniform map")
    sp.add_argument("--base", required=True)
    sp.add_argument("--super", dest="super", required=True)
    sp.add_argument("--map", required=True)
    sp.add_argument("--params", required=True, help="normalization params JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.set_defaults(fn=_cmd_generate)

    ev = sub.add_parser("eval", help="evaluation battery")
    evsub = ev.add_subparsers(dest="eval_command", required=True)

    sp = evsub.add_parser("ccc", help="concordance between two id,value CSVs")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=_cmd_eval_ccc)

    sp = evsub.add_parser("cov", help="per-case coefficient of variation in one organ")
    sp.add_argument("--images", required=True, help="CSV: id,image,labels")
    sp.add_argument("--label", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_eval_cov)

    sp = evsub.add_parser("radiomics", help="first-order + GLCM features per case/region")
    sp.add_argument("--images", required=True, help="CSV: id,image,labels")
    sp.add_argument("--label", type=int, default=None)
    sp.add_argument("--bins", type=int, default=32)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_eval_radiomics)

    sp = evsub.add_parser("js", help="JS distance between two id,value CSVs")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.set_defaults(fn=_cmd_eval_js)

    sp = evsub.add_parser("tumor-task", help="paired tumor insertion + threshold segmentation")
    sp.add_argument("--pairs", required=True, help="CSV: id,pred,ref,labels")
    sp.add_argument("--roi-label", type=int, required=True)
    sp.add_argument("--fraction", type=float, default=0.41)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_eval_tumor_task)

    sp = sub.add_parser("schedule-dump", help="write the per-timestep constants as CSV")
    sp.add_argument("--kind", required=True)
    sp.add_argument("--T", dest="T", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_schedule_dump)

    st = sub.add_parser("study", help="observer study service")
    stsub = st.add_subparsers(dest="study_command", required=True)

    sp = stsub.add_parser("serve", help="run the HTTP service")
    sp.add_argument("--store", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=8601)
    sp.set_defaults(fn=_cmd_study_serve)

    sp = stsub.add_parser("report", help="summary table over all sessions")
    sp.add_argument("--store", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=_cmd_study_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
