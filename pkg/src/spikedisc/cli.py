"""Command-line entry point: ``spikedisc {gen-data,train,eval,fuse,analyze}``.

Exit codes: 0 success, 2 configuration/input error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from spikedisc.errors import ConfigError, ContractError, DimensionError, NumericFault

log = logging.getLogger("spikedisc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    return str(o)


def _emit(obj) -> None:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return str(v)
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v

    print(json.dumps(clean(obj), indent=1, default=_json_default))


def cmd_gen_data(args) -> int:
    from spikedisc.data import AvToySpec, generate_avtoy
    from spikedisc.train import tomllib

    raw = {}
    if args.spec:
        try:
            with open(args.spec, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read spec {args.spec}: {exc}") from None
    spec = AvToySpec.from_dict(raw.get("avtoy", raw))
    out = generate_avtoy(spec, args.seed, args.out)
    _emit({"dataset": str(out), "pairs": spec.n_classes * spec.per_class})
    return EXIT_OK


def _train_summary(res):
    last = res.metrics[-1] if res.metrics else {}
    return {"out_dir": str(res.out_dir), "last": str(res.last_ckpt), "best": str(res.best_ckpt),
            "epochs": len(res.metrics), "final": last}


def cmd_train(args) -> int:
    from spikedisc.train import ExperimentConfig, train

    cfg = ExperimentConfig.from_toml(args.config)
    _emit(_train_summary(train(cfg, resume=args.resume)))
    return EXIT_OK


def cmd_fuse(args) -> int:
    from dataclasses import replace

    from spikedisc.train import ExperimentConfig, run_fusion

    cfg = ExperimentConfig.from_toml(args.config)
    if cfg.modality != "fusion":
        cfg = replace(cfg, modality="fusion", ablation=None, model={})
    res = run_fusion(args.visual, args.audio, cfg, resume=args.resume)
    _emit(_train_summary(res))
    return EXIT_OK


def cmd_eval(args) -> int:
    from spikedisc.train import evaluate

    out = evaluate(args.ckpt, args.data, args.split, args.export_features, args.confusion)
    out.pop("result")
    _emit(out)
    return EXIT_OK


def _bank_report(bank, out_dir: Path, tag: str):
    from spikedisc.discrimination import cosine_distance_matrix, export_heatmap_data, intra_inter_stats

    clean = bank.without_flagged() if bank.zero_norm else bank
    if bank.zero_norm:
        log.warning("%s: dropping %d zero-norm sample(s) %s", tag, len(bank.zero_norm), bank.zero_norm[:10])
    m = cosine_distance_matrix(clean)
    stats = intra_inter_stats(m)
    csv_path, sidecar = export_heatmap_data(m, out_dir / f"{tag}_distances.csv")
    stats.update({"n": len(clean), "dropped": list(bank.zero_norm), "modality": bank.modality,
                  "set": bank.split, "head": bank.head, "heatmap": str(csv_path), "classes": str(sidecar)})
    return stats


def _lemma_report(ckpt, data_dir, split):
    from spikedisc.discrimination import LemmaProbe, lemma1_check, lemma2_series_check
    from spikedisc.layers import L2NormHead
    from spikedisc.train import ExperimentConfig, evaluate, load_model, split_arrays

    model, meta, _ = load_model(ckpt)
    T = ExperimentConfig.from_dict(meta["experiment"]).T
    res = evaluate(ckpt, data_dir, split)["result"]
    if isinstance(model.head, L2NormHead):
        W = model.head.normalized_weight().data
        first = res.first_step
    else:
        # bias-augmented: [a, 1] · [w, b]
        W = np.concatenate([model.head.fc.weight.data, model.head.fc.bias.data[:, None]], axis=1)
        first = np.concatenate([res.first_step, np.ones((len(res.first_step), 1))], axis=1)
    labels = res.labels
    rep = lemma1_check(LemmaProbe(W, first, model.out_lif.beta), labels, res.predictions == labels)
    x, _ = split_arrays(model, meta, data_dir, split)
    steps = model.forward_multistep(x[:64], T).embeddings.data
    if not isinstance(model.head, L2NormHead):
        steps = np.concatenate([steps, np.ones(steps.shape[:2] + (1,))], axis=2)
    probe = LemmaProbe(W, steps, model.out_lif.beta)
    return {
        "lemma1": {"n_correct": rep["n"], "violations": rep["violations"], "ties": rep["ties"],
                   "violation_rate": rep["violation_rate"],
                   "angular_margin_quantiles": np.nanquantile(rep["angular_margins"], [0.05, 0.5, 0.95]).tolist()
                   if rep["n"] else []},
        "lemma2_max_deviation": lemma2_series_check(probe),
    }


def cmd_analyze(args) -> int:
    from spikedisc.discrimination import FeatureBank

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"bank": _bank_report(FeatureBank.load(args.bank), out_dir, "bank")}
    if args.bank2:
        report["bank2"] = _bank_report(FeatureBank.load(args.bank2), out_dir, "bank2")
        r1, r2 = report["bank"]["separability_ratio"], report["bank2"]["separability_ratio"]
        report["ratio_of_ratios"] = r1 / r2 if r2 not in (0.0,) and math.isfinite(r2) else float("nan")
    if args.ckpt:
        if not args.data:
            raise ConfigError("--ckpt requires --data")
        report["lemmas"] = _lemma_report(args.ckpt, args.data, args.split)
    (out_dir / "report.json").write_text(json.dumps(report, indent=1, default=_json_default))
    _emit(report)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spikedisc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic audio-visual dataset")
    g.add_argument("--spec", help="TOML file with avtoy fields (optionally under [avtoy])")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--export-features", help="write the accumulated feature bank here")
    e.add_argument("--confusion", help="write the normalized confusion matrix CSV here")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="train the fusion SMLP on two frozen extractors")
    f.add_argument("--visual", required=True)
    f.add_argument("--audio", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--resume")
    f.set_defaults(func=cmd_fuse)

    a = sub.add_parser("analyze", help="distance-matrix statistics and heatmap data for feature banks")
    a.add_argument("--bank", required=True)
    a.add_argument("--bank2")
    a.add_argument("--out", required=True)
    a.add_argument("--ckpt", help="also run the output-layer lemma probes on this checkpoint")
    a.add_argument("--data")
    a.add_argument("--split", choices=("train", "test"), default="train")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DimensionError, ContractError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
