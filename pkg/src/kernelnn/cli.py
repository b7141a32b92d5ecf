"""Command-line front end.

Subcommands: qc, kernel, fit, predict, simulate, check-bounds.  Outputs
are UTF-8 CSV/JSON files under --out; every run also writes a manifest
recording the command, resolved configuration, its hash, the seed, and
package versions so results can be reproduced exactly.  Human
diagnostics go to stderr; stdout carries nothing but optional progress.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, knn, lmm, minque, restrict, simulate
from .genotype import (
    EmptyResultError,
    GenotypeParseError,
    GenotypeValueError,
    QcThresholds,
    align_to_samples,
    apply_qc,
    load_covariates,
    load_genotypes,
    load_phenotype,
)
from .kernels import (
    KernelMatrix,
    OutputKernelSpec,
    covariance_kernel,
    expand_output_basis,
    ibs_kernel,
    polynomial_input_kernel,
    product_kernel,
)

logger = logging.getLogger(__name__)

INPUT_KERNEL_KINDS = ("product", "covariance", "ibs", "poly2")
OUTPUT_KERNEL_KINDS = ("product", "poly2")


def _config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canon.encode()).hexdigest()


def _write_manifest(out: Path, command: str, config: dict, seed: int | None) -> None:
    manifest = {
        "command": command,
        "argv": sys.argv,
        "config": config,
        "config_hash": _config_hash(config),
        "seed": seed,
        "versions": {
            "kernelnn": __version__,
            "numpy": np.__version__,
        },
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _ensure_out(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_input_kernel(kind: str, G, poly_c: float) -> KernelMatrix:
    if kind == "product":
        return product_kernel(G.values)
    if kind == "covariance":
        return covariance_kernel(G)
    if kind == "ibs":
        return ibs_kernel(G)
    return polynomial_input_kernel(G.values, c=poly_c, degree=2, label="poly2")


def _output_spec(kind: str, poly_c: float) -> OutputKernelSpec:
    if kind == "poly2":
        return OutputKernelSpec(kind="polynomial", c=poly_c, d=2)
    return OutputKernelSpec(kind="identity")


def _write_predictions(path: Path, sample_ids, y, yhat) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "y", "y_hat", "residual"])
        for sid, obs, pred in zip(sample_ids, y, yhat):
            writer.writerow([sid, format(obs, ".10g"), format(pred, ".10g"),
                             format(obs - pred, ".10g")])


def _load_aligned(args):
    G = load_genotypes(args.genotype)
    pheno_ids, pheno = load_phenotype(args.phenotype)
    y = align_to_samples(G.sample_ids, pheno_ids, pheno, what="phenotype")
    Z = None
    if getattr(args, "covariates", None):
        cov_ids, cov, _ = load_covariates(args.covariates)
        Z = align_to_samples(G.sample_ids, cov_ids, cov, what="covariates")
    return G, y, Z


def cmd_qc(args) -> int:
    out = _ensure_out(args.out)
    thresholds = QcThresholds(
        min_call_rate=args.min_call_rate,
        min_maf=args.min_maf,
        hwe_alpha=args.hwe_alpha,
    )
    config = {"genotype": str(args.genotype), **thresholds.__dict__}
    G = load_genotypes(args.genotype)
    try:
        filtered, report = apply_qc(G, thresholds)
    except EmptyResultError as exc:
        exc.report.save(out / "qc_report.json")
        _write_manifest(out, "qc", config, None)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    filtered.save(out / "filtered_genotypes.csv")
    report.save(out / "qc_report.json")
    _write_manifest(out, "qc", config, None)
    logger.info("QC wrote %d/%d SNPs to %s", report.n_retained, report.n_input, out)
    return 0


def cmd_kernel(args) -> int:
    out = _ensure_out(args.out)
    G = load_genotypes(args.genotype)
    kernel = _build_input_kernel(args.kind, G, args.poly_c)
    kernel.save(out / "kernel.csv")
    config = {"genotype": str(args.genotype), "kind": args.kind, "poly_c": args.poly_c}
    _write_manifest(out, "kernel", config, None)
    return 0


def cmd_fit(args) -> int:
    out = _ensure_out(args.out)
    G, y, Z = _load_aligned(args)
    kinds = args.input_kernel or ["product"]
    kernels = [_build_input_kernel(k, G, args.poly_c) for k in kinds]
    config = {
        "genotype": str(args.genotype),
        "phenotype": str(args.phenotype),
        "covariates": str(args.covariates) if args.covariates else None,
        "model": args.model,
        "input_kernels": kinds,
        "output_kernel": args.output_kernel,
        "poly_c": args.poly_c,
    }

    if args.model == "lmm":
        fitted = lmm.reml_fit(y, Z, kernels)
        yhat, degenerate = lmm.blup(fitted, y, Z, kernels)
        model = {"model": "lmm", "input_kernels": kinds, "poly_c": args.poly_c,
                 "degenerate": degenerate, "fit": fitted.to_dict()}
    else:
        spec = knn.KnnSpec(kernels, _output_spec(args.output_kernel, args.poly_c))
        fitted = knn.fit(spec, y, Z)
        yhat = knn.predict(fitted, y, Z)
        model = {"model": "knn", "input_kernels": kinds, "poly_c": args.poly_c,
                 "fit": fitted.to_dict()}
        if args.save_predictor:
            fitted.save_predictor(out / "predictor.csv")

    (out / "model.json").write_text(json.dumps(model, indent=2))
    _write_predictions(out / "predictions.csv", G.sample_ids, y, yhat)
    _write_manifest(out, "fit", config, None)
    return 0


def cmd_predict(args) -> int:
    out = _ensure_out(args.out)
    model = json.loads(Path(args.model).read_text())
    G, y, Z = _load_aligned(args)
    kernels = [_build_input_kernel(k, G, model.get("poly_c", 1.0))
               for k in model["input_kernels"]]
    fit_data = model["fit"]

    if model["model"] == "lmm":
        fitted = lmm.FittedLmm(
            tau=np.asarray(fit_data["tau"], dtype=np.float64),
            tau_err=float(fit_data["tau_err"]),
            beta=None if fit_data["beta"] is None else np.asarray(fit_data["beta"]),
            converged=bool(fit_data["converged"]),
            iterations=int(fit_data["iterations"]),
        )
        yhat, _ = lmm.blup(fitted, y, Z, kernels)
    else:
        output = OutputKernelSpec.from_dict(fit_data["output_kernel"])
        basis = expand_output_basis(kernels, output)
        theta = np.asarray(fit_data["theta"]["theta"], dtype=np.float64)
        beta = None if fit_data["beta"] is None else np.asarray(fit_data["beta"])
        fitted = knn.FittedKnn(
            theta=minque.VarianceComponents(theta=theta, theta_raw=theta),
            basis=basis,
            beta=beta,
            predictor=np.zeros((basis.n, basis.n)),
            v_hat=basis.reconstruct(theta),
            output=output,
        )
        fitted.predictor = knn.predictor_matrix(fitted)
        yhat = knn.predict(fitted, y, Z)

    _write_predictions(out / "predictions.csv", G.sample_ids, y, yhat)
    config = {"model": str(args.model), "genotype": str(args.genotype),
              "phenotype": str(args.phenotype)}
    _write_manifest(out, "predict", config, None)
    return 0


def cmd_simulate(args) -> int:
    out = _ensure_out(args.out)
    raw = json.loads(Path(args.config).read_text())
    scenarios = raw.pop("scenarios", None)
    if scenarios is None:
        scenarios = [raw.pop("scenario")] if "scenario" in raw else []
    if not scenarios:
        raise ValueError("simulation config needs 'scenario' or 'scenarios'")
    if args.seed is not None:
        raw["master_seed"] = args.seed

    def progress(done, total, scenario):
        if args.progress:
            print(f"{scenario}: {done}/{total}", flush=True)

    table = simulate.ResultsTable()
    configs = []
    for scenario in scenarios:
        config = simulate.SimulationConfig.from_dict({**raw, "scenario": scenario})
        configs.append(config.to_dict())
        part = simulate.run_monte_carlo(
            config, threads=args.threads,
            progress=lambda done, c=config: progress(done, c.iterations, c.scenario),
        )
        table.rows.extend(part.rows)
    table.write_csv(out / "results.csv")
    table.save_summary(out / "summary.json")
    _write_manifest(out, "simulate", {"scenarios": scenarios, **raw},
                    raw.get("master_seed"))
    return 0


def _random_unit_psd(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random PSD matrix with entries in [0, 1]."""
    A = rng.uniform(size=(n, max(2, n // 2)))
    K = A @ A.T
    return K / K.max()


def cmd_check_bounds(args) -> int:
    out = _ensure_out(args.out)
    config = json.loads(Path(args.config).read_text())
    seed = int(config.get("seed", 0))
    rng = np.random.default_rng(seed)
    n = int(config.get("n", 30))
    n_kernels = int(config.get("kernels", 1))
    instances = int(config.get("instances", 20))
    tau_tilde = float(config.get("tau_tilde", 1.0))
    xi = config.get("xi") or [1.0] * n_kernels
    xi = np.asarray(xi, dtype=np.float64)
    sigma_cfg = config.get("sigma_tilde_sq", "auto")
    sigma_tilde_sq = (tau_tilde * float(xi.min()) if sigma_cfg == "auto"
                      else float(sigma_cfg))
    spec = OutputKernelSpec.from_dict(config.get("output_kernel", {"kind": "identity"}))

    checks = []
    for _ in range(instances):
        kernels = [product_kernel(rng.standard_normal((n, 2 * n)))
                   for _ in range(n_kernels)]
        report = knn.pe_bound_check(kernels, xi, tau_tilde, sigma_tilde_sq, spec)
        checks.append(report.to_dict())
    holds = [c["bound_holds"] for c in checks if c["bound_holds"] is not None]

    result = {
        "config": config,
        "bound_checks": checks,
        "all_hypotheses_met": all(c["hypothesis_met"] for c in checks),
        "all_hold": bool(holds) and all(holds),
    }
    if spec.kind == "polynomial":
        result["schur_threshold"] = {"d": spec.d, "value": knn.schur_positivity_threshold(spec.d)}

    scan = config.get("schur_scan")
    if scan:
        d = int(scan.get("d", 2))
        c_val = float(scan.get("c", 1.0))
        n_scan = int(scan.get("instances", 100))
        n_dim = int(scan.get("n", 10))
        negative = 0
        worst = 0.0
        for _ in range(n_scan):
            sigma = _random_unit_psd(n_dim, rng)
            gap = (c_val + sigma) ** d - sigma
            eig_min = float(np.linalg.eigvalsh((gap + gap.T) / 2.0)[0])
            worst = min(worst, eig_min)
            if eig_min < -1e-8:
                negative += 1
        result["schur_scan"] = {
            "c": c_val, "d": d, "threshold": knn.schur_positivity_threshold(d),
            "instances": n_scan, "negative_instances": negative,
            "worst_min_eigenvalue": worst,
        }
        if negative:
            logger.warning("Schur scan at c=%.4g < threshold found %d/%d instances "
                           "with negative minimum eigenvalue", c_val, negative, n_scan)

    (out / "bound_report.json").write_text(json.dumps(result, indent=2))
    _write_manifest(out, "check-bounds", config, seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernelnn",
        description="Kernel neural network and linear mixed model toolkit for genomic prediction.",
    )
    parser.add_argument("--verbose", action="store_true", help="log INFO diagnostics to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("qc", help="filter genotypes by call rate, MAF and HWE")
    p.add_argument("genotype")
    p.add_argument("--out", required=True)
    p.add_argument("--min-call-rate", type=float, default=0.9)
    p.add_argument("--min-maf", type=float, default=0.01)
    p.add_argument("--hwe-alpha", type=float, default=1e-6)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("kernel", help="build a kernel matrix from genotypes")
    p.add_argument("genotype")
    p.add_argument("--kind", choices=INPUT_KERNEL_KINDS, default="product")
    p.add_argument("--poly-c", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("fit", help="fit a KNN or LMM model")
    p.add_argument("genotype")
    p.add_argument("phenotype")
    p.add_argument("--covariates")
    p.add_argument("--model", choices=("knn", "lmm"), default="knn")
    p.add_argument("--input-kernel", action="append", choices=INPUT_KERNEL_KINDS,
                   help="repeatable; defaults to a single product kernel")
    p.add_argument("--output-kernel", choices=OUTPUT_KERNEL_KINDS, default="product")
    p.add_argument("--poly-c", type=float, default=1.0)
    p.add_argument("--save-predictor", action="store_true",
                   help="also write the n x n shrinkage matrix (KNN only)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict from a saved model")
    p.add_argument("genotype")
    p.add_argument("phenotype")
    p.add_argument("--covariates")
    p.add_argument("--model", required=True, help="model.json from 'fit'")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("simulate", help="run the Monte Carlo comparison harness")
    p.add_argument("config", help="JSON simulation config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="override the config master seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check-bounds", help="evaluate prediction-error bounds")
    p.add_argument("config", help="JSON bound-check config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_check_bounds)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (GenotypeParseError, GenotypeValueError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EmptyResultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, restrict.CovarianceError,
            minque.UnidentifiableBasisError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
