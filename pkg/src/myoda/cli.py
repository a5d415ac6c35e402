"""Command-line entry point wiring every stage of the pipeline.

Subcommands: gen-phantoms, preprocess, train-scratch, infer, split-cohorts,
refine, finetune, evaluate, sensitivity, pipeline. ``pipeline`` chains
phantom generation, preprocessing, stage-1 training, cohort splitting,
refinement, stage-2 fine-tuning and evaluation end to end; ``--ablation``
switches reproduce the four ablation variants (from scratch, + fine tune,
+ muscle mask, + mask + fine tune).

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. Every
artifact directory receives a run record (config hash, seeds, input
hashes, produced checkpoints).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .cohort import load_split, predict_labelmap, rank_and_split, refine_pseudo_label, save_split
from .core import (
    DatasetManifest,
    Domain,
    ManifestItem,
    Mask,
    MaskKind,
    ValidationError,
    load_image,
    load_labelmap,
    load_manifest,
    load_mask,
    save_image,
    save_labelmap,
    save_manifest,
    save_mask,
    split_dataset_by_subject,
    stage_seed,
)
from .nets import ROLE_SEGMENTER, load_model
from .metrics import (
    erosion_sensitivity,
    evaluate,
    write_eval_csv,
    write_sensitivity_csv,
    write_sensitivity_svg,
)
from .phantom import PhantomParams, generate_dataset
from .preprocess import (
    NormalizationSpec,
    apply_dilation_schedule,
    extract_muscle_bone_masks,
    normalize,
    parse_dilation_schedule,
    split_left_right,
)
from .train_finetune import finetune, generate_pseudo_labels, refine_cohort_labels
from .train_scratch import train_scratch


class CliParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_run_record(out_dir: Path, subcommand: str, cfg: dict, inputs: list, checkpoints: list):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "subcommand": subcommand,
        "config_hash": cfgmod.config_hash(cfg),
        "seeds": {"run": cfg.get("run.seed")},
        "input_hashes": {str(p): _file_hash(p) for p in inputs if Path(p).is_file()},
        "checkpoints": [str(c) for c in checkpoints],
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommand handlers


def cmd_gen_phantoms(args) -> int:
    params = PhantomParams(
        image_size=args.size,
        n_samples=args.n,
        noise_sigma=args.noise,
        deformation_amplitude=args.deformation,
        seed=args.seed,
    )
    generate_dataset(params, args.out, workers=args.workers)
    print(f"wrote {args.n} phantom pairs to {args.out}")
    return 0


def _preprocess_manifest(
    manifest: DatasetManifest,
    out_dir: Path,
    spec,
    dilation,
    extract_masks_for_ct: bool = True,
    split_lr: bool = False,
) -> DatasetManifest:
    out_dir.mkdir(parents=True, exist_ok=True)
    items = []

    def emit(item_id, subject_id, side, img, lbl, inherited_mask=None):
        norm = normalize(img, spec)
        image_path = out_dir / f"{item_id}.mimg"
        save_image(norm, image_path)
        label_path = None
        if lbl is not None:
            if dilation and img.domain in (Domain.MR, Domain.SYN_MR):
                lbl = apply_dilation_schedule(lbl, dilation)
            label_path = out_dir / f"{item_id}_lbl.pgm"
            save_labelmap(lbl, label_path)
        mask_path = inherited_mask
        if extract_masks_for_ct and img.domain in (Domain.CT, Domain.SYN_CT):
            muscle, bone = extract_muscle_bone_masks(norm)
            mask_path = str(out_dir / f"{item_id}_muscle.pgm")
            save_mask(muscle, out_dir / f"{item_id}_muscle.pgm")
            save_mask(bone, out_dir / f"{item_id}_bone.pgm")
        items.append(
            ManifestItem(
                image_path=str(image_path),
                label_path=str(label_path) if label_path else None,
                mask_path=mask_path,
                subject_id=subject_id,
                side=side,
            )
        )

    for it in manifest.items:
        img = load_image(it.image_path)
        lbl = load_labelmap(it.label_path) if it.label_path else None
        if not split_lr:
            emit(it.item_id, it.subject_id, it.side, img, lbl, inherited_mask=it.mask_path)
            continue
        try:
            (l_img, l_lbl), (r_img, r_lbl) = split_left_right(img, lbl)
        except ValidationError as exc:
            print(f"skipping {it.item_id}: {exc}", file=sys.stderr)
            continue
        emit(f"{it.item_id}_L", it.subject_id, "L", l_img, l_lbl)
        emit(f"{it.item_id}_R", it.subject_id, "R", r_img, r_lbl)

    out = DatasetManifest(items=tuple(items), cohort=manifest.cohort)
    save_manifest(out, out_dir / "manifest.csv")
    return out


def cmd_preprocess(args) -> int:
    manifest = load_manifest(args.manifest)
    spec_kwargs = {}
    if args.ct_clip:
        spec_kwargs["ct_clip"] = (args.ct_clip[0], args.ct_clip[1])
    spec = NormalizationSpec(**spec_kwargs)
    dilation = parse_dilation_schedule(args.dilate) if args.dilate else ()
    out = _preprocess_manifest(manifest, Path(args.out), spec, dilation, split_lr=args.split_lr)
    print(f"preprocessed {len(manifest)} items into {len(out)} outputs under {args.out}")
    return 0


def cmd_train_scratch(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.paper_verbatim_kernels:
        cfg["losses.sobel_paper_verbatim"] = True
    if args.coupled:
        cfg["train.coupled"] = True
    checkpoints = train_scratch(
        cfgmod.train_config(cfg),
        args.mr,
        args.ct,
        args.out,
        net_cfg=cfgmod.net_config(cfg),
        val_manifest=args.val,
        resume=args.resume,
    )
    write_run_record(Path(args.out), "train-scratch", cfg, [args.mr, args.ct], list(checkpoints.paths.values()))
    print(f"stage-1 checkpoints in {args.out}")
    return 0


def cmd_infer(args) -> int:
    seg = load_model(args.checkpoint, expected_role=ROLE_SEGMENTER)
    seg.eval()
    manifest = load_manifest(args.manifest)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for it in manifest.items:
        img = load_image(it.image_path)
        pred = predict_labelmap(seg, img)
        if args.apply_mask:
            if it.mask_path is None:
                raise ValidationError(f"--apply-mask needs a mask for item {it.item_id}")
            muscle = load_mask(it.mask_path, MaskKind.MUSCLE)
            pred = refine_pseudo_label(pred, muscle, Mask(values=np.zeros_like(muscle.values), kind=MaskKind.BONE))
        save_labelmap(pred, out_dir / f"{it.item_id}_pred.pgm")
    print(f"wrote {len(manifest)} predictions to {args.out}")
    return 0


def cmd_split_cohorts(args) -> int:
    pseudo_dir = Path(args.pseudo_dir) if args.pseudo_dir else Path(args.out).parent / "pseudo"
    records = generate_pseudo_labels(args.checkpoint, args.manifest, pseudo_dir, entropy_scope=args.entropy_scope)
    split = rank_and_split(records, args.fraction)
    save_split(split, records, args.out)
    print(f"split {len(records)} items: {len(split.easy)} easy / {len(split.hard)} hard -> {args.out}")
    return 0


def cmd_refine(args) -> int:
    split, records = load_split(args.split)
    manifest = load_manifest(args.manifest)
    pseudo_dir = Path(args.pseudo)
    filled = [
        type(r)(
            item_id=r.item_id,
            mean_entropy=r.mean_entropy,
            pseudo_label_path=str(pseudo_dir / f"{r.item_id}_pl.pgm"),
            entropy_map_path=str(pseudo_dir / f"{r.item_id}_ent.mimg"),
        )
        for r in records
    ]
    refined = refine_cohort_labels(split, filled, manifest, args.out)
    print(f"refined {len(refined)} easy-cohort pseudo-labels into {args.out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = cfgmod.load_config(args.config)
    ft_cfg = cfgmod.finetune_config(cfg)
    split, records = load_split(args.split)
    pseudo_dir = Path(args.pseudo)
    records = [
        type(r)(
            item_id=r.item_id,
            mean_entropy=r.mean_entropy,
            pseudo_label_path=str(pseudo_dir / f"{r.item_id}_pl.pgm"),
            entropy_map_path=str(pseudo_dir / f"{r.item_id}_ent.mimg"),
        )
        for r in records
    ]
    manifest = load_manifest(args.manifest)
    if args.masks:
        masks_dir = Path(args.masks)
        manifest = DatasetManifest(
            items=tuple(
                ManifestItem(
                    image_path=it.image_path,
                    label_path=it.label_path,
                    mask_path=str(masks_dir / f"{it.item_id}_muscle.pgm"),
                    subject_id=it.subject_id,
                    side=it.side,
                )
                for it in manifest.items
            ),
            cohort=manifest.cohort,
        )
    checkpoints = finetune(
        ft_cfg, args.checkpoint, split, records, manifest, args.out, net_cfg=cfgmod.net_config(cfg)
    )
    write_run_record(Path(args.out), "finetune", cfg, [args.split, args.manifest], list(checkpoints.paths.values()))
    print(f"fine-tuned checkpoints in {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    result = evaluate(args.checkpoint, args.manifest, out_csv=args.out, apply_mask=args.apply_mask)
    print(result.format_table())
    return 0


def cmd_sensitivity(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    per_item = {}
    for pred_path in sorted(pred_dir.glob("*.pgm")):
        truth_path = truth_dir / pred_path.name
        if not truth_path.exists():
            continue
        per_item[pred_path.stem] = erosion_sensitivity(load_labelmap(pred_path), load_labelmap(truth_path))
    if not per_item:
        raise ValidationError(f"no matching prediction/truth PGM pairs under {pred_dir} and {truth_dir}")
    write_sensitivity_csv(per_item, args.out)
    if args.svg:
        write_sensitivity_svg(per_item, args.svg)
    print(f"wrote erosion sensitivity curves for {len(per_item)} items to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# pipeline


def run_pipeline(
    cfg: dict, out_dir: Path, ablation: set[str], data_dir: Path | None = None, workers: int = 1
) -> dict[str, Path]:
    """Chain every stage on phantom data; returns the evaluation CSV paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.save_config(cfg, out_dir / "resolved_config.cfg")
    seed = int(cfg["run.seed"])

    # (0) data
    if data_dir is None:
        data_dir = out_dir / "data"
        params = cfgmod.phantom_params(cfg, seed=stage_seed(seed, "phantom"))
        generate_dataset(params, data_dir, workers=workers)
    mr_all = load_manifest(data_dir / "manifest_mr.csv")
    ct_all = load_manifest(data_dir / "manifest_ct.csv")

    # (1) cohorts by participant; all MR goes to training
    fractions = tuple(float(f) for f in cfg["split.fractions"])
    ct_train, ct_val, ct_test = split_dataset_by_subject(ct_all, fractions, seed=stage_seed(seed, "split"))

    # (2) preprocessing
    spec = cfgmod.normalization_spec(cfg)
    dilation = parse_dilation_schedule(str(cfg["preprocess.dilate"]))
    proc_mr = _preprocess_manifest(mr_all, out_dir / "proc_mr", spec, dilation)
    proc_ct_train = _preprocess_manifest(ct_train, out_dir / "proc_ct_train", spec, ())
    proc_ct_val = _preprocess_manifest(ct_val, out_dir / "proc_ct_val", spec, ())
    proc_ct_test = _preprocess_manifest(ct_test, out_dir / "proc_ct_test", spec, ())

    # (3) stage 1
    scratch_dir = out_dir / "scratch"
    checkpoints = train_scratch(
        cfgmod.train_config(cfg),
        proc_mr,
        proc_ct_train,
        scratch_dir,
        net_cfg=cfgmod.net_config(cfg),
        val_manifest=proc_ct_val if len(proc_ct_val) else None,
    )
    seg_scratch = checkpoints["seg"]

    evals: dict[str, Path] = {}
    evals["scratch"] = out_dir / "eval_scratch.csv"
    evaluate(seg_scratch, proc_ct_test, out_csv=evals["scratch"], apply_mask=False)
    if "all" in ablation or "mask-only" in ablation:
        evals["scratch_mask"] = out_dir / "eval_scratch_mask.csv"
        evaluate(seg_scratch, proc_ct_test, out_csv=evals["scratch_mask"], apply_mask=True)

    if "no-finetune" in ablation:
        write_run_record(out_dir, "pipeline", cfg, [data_dir / "manifest_mr.csv"], [seg_scratch])
        return evals

    # (4) pseudo-labels, ranking, cohorts
    pseudo_dir = out_dir / "pseudo"
    records = generate_pseudo_labels(seg_scratch, proc_ct_train, pseudo_dir, entropy_scope=str(cfg["cohort.entropy_scope"]))
    split = rank_and_split(records, float(cfg["cohort.fraction"]))
    save_split(split, records, out_dir / "split.csv")

    # (5) fine-tune variants
    ft_cfg = cfgmod.finetune_config(cfg)
    if "no-adv" in ablation:
        ft_cfg = cfgmod.finetune_config({**cfg, "losses.lambda6": 0.0})
    variants = []
    refine_proposed = ft_cfg.refine and "no-refine" not in ablation
    variants.append(("proposed", refine_proposed, True))
    if "all" in ablation and refine_proposed:
        variants.append(("finetune", False, False))  # fine-tune on raw pseudo-labels, unmasked eval

    for name, do_refine, mask_eval in variants:
        run_cfg = replace(ft_cfg, refine=do_refine)
        ft_dir = out_dir / ("finetune_" + name)
        ck = finetune(run_cfg, seg_scratch, split, records, proc_ct_train, ft_dir, net_cfg=cfgmod.net_config(cfg))
        evals[name] = out_dir / f"eval_{name}.csv"
        evaluate(ck["seg"], proc_ct_test, out_csv=evals[name], apply_mask=mask_eval and do_refine)

    write_run_record(
        out_dir,
        "pipeline",
        cfg,
        [data_dir / "manifest_mr.csv", data_dir / "manifest_ct.csv"],
        [seg_scratch],
    )
    return evals


def cmd_pipeline(args) -> int:
    cfg = cfgmod.load_config(args.config)
    ablation = set(filter(None, (args.ablation or "").split(",")))
    data_dir = Path(args.data) if args.data else None
    evals = run_pipeline(cfg, Path(args.out), ablation, data_dir, workers=args.workers)
    for name, path in evals.items():
        print(f"{name}: {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> CliParser:
    parser = CliParser(prog="myoda", description="MR-to-CT muscle group segmentation pipeline")
    sub = parser.add_subparsers(dest="command", parser_class=CliParser)

    p = sub.add_parser("gen-phantoms", help="generate paired MR/CT thigh phantoms")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--noise", type=float, default=10.0)
    p.add_argument("--deformation", type=float, default=0.08)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_phantoms)

    p = sub.add_parser("preprocess", help="normalize images, dilate MR labels, extract CT masks")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ct-clip", type=float, nargs=2, metavar=("LOW", "HIGH"))
    p.add_argument("--dilate", default="quadriceps=6,hamstring=2")
    p.add_argument("--split-lr", action="store_true", help="split two-thigh slices into left/right crops")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-scratch", help="stage 1: co-train translators and segmenter")
    p.add_argument("--config")
    p.add_argument("--mr", required=True)
    p.add_argument("--ct", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument(
        "--paper-verbatim-kernels",
        action="store_true",
        help="use the printed sobel v-kernel (sums instead of differencing)",
    )
    p.add_argument("--coupled", action="store_true", help="flow segmentation gradient into the generator")
    p.set_defaults(func=cmd_train_scratch)

    p = sub.add_parser("infer", help="run the segmenter over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--apply-mask", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("split-cohorts", help="rank CT items by mean entropy into easy/hard")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--fraction", type=float, default=2.0 / 3.0)
    p.add_argument("--entropy-scope", default="all", choices=["all", "foreground"])
    p.add_argument("--pseudo-dir")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split_cohorts)

    p = sub.add_parser("refine", help="mask-refine easy-cohort pseudo-labels")
    p.add_argument("--split", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("finetune", help="stage 2: self-training with split adversary")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="per-class Dice over a labeled manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--apply-mask", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sensitivity", help="erosion sensitivity curves from prediction/truth dirs")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("pipeline", help="run every stage end to end on phantoms")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="existing phantom dir (skips generation)")
    p.add_argument("--ablation", default="", help="comma list: all,no-refine,no-adv,no-finetune,mask-only")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
