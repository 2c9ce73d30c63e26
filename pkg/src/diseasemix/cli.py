"""Command-line pipeline: generate, rates, fit, posterior, cluster, survive,
eci, embed, pipeline, replay.

Every subcommand is a pure function of (inputs, options, seed): numeric
outputs are byte-identical across re-runs, and each output directory gets
exactly one manifest recording resolved options and content digests.
Options come from flags, which override an optional key=value config file.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import bin_exposure, load_cohort, load_vocabulary, write_cohort
from .cluster import sweep_subgroups
from .embed import ExactTsne, export_embedding
from .errors import DataError, DiseasemixError, NumericalError, UsageError
from .generate import GeneratorConfig, default_eci_mapping, generate_synthetic_cohort, preset_config
from .lda import LatentDirichletGibbs, patient_topic_posterior
from .manifest import MANIFEST_NAME, RunManifest, file_digest
from .pdm import PoissonDirichletModel, patient_topic_posterior_pdm
from .rates import PoissonRateModel, RateTable
from .stats import (
    eci_profile,
    kaplan_meier,
    load_eci_mapping,
    log_rank_test,
    subgroup_report,
    write_eci_mapping,
)
from .svgplot import km_curves_svg
from .topics import (
    TopicFit,
    read_gamma_csv,
    read_phi_csv,
    read_theta_csv,
    write_acceptance_csv,
    write_diagnostics_csv,
    write_gamma_csv,
    write_phi_csv,
    write_theta_csv,
)

COHORT_FILES = ("diagnoses.csv", "demographics.csv", "vocabulary.txt")


# ---------------------------------------------------------------------------
# option plumbing


def _parse_config_file(path) -> dict[str, str]:
    """Flat key = value lines; # starts a comment."""
    values: dict[str, str] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def _convert(name: str, raw, kind):
    if raw is None:
        return None
    if isinstance(raw, str):
        try:
            if kind is bool:
                lowered = raw.lower()
                if lowered in ("1", "true", "yes"):
                    return True
                if lowered in ("0", "false", "no"):
                    return False
                raise ValueError(raw)
            return kind(raw)
        except ValueError:
            raise UsageError(f"option {name!r}: cannot parse {raw!r} as {kind.__name__}") from None
    return kind(raw)


def _resolve(args: argparse.Namespace, config: dict, spec: dict) -> dict:
    """Merge flags over config-file values over defaults, with typing."""
    opts = {}
    for name, (kind, default, required) in spec.items():
        value = getattr(args, name, None)
        if kind is bool and value is False:
            value = None  # store_true default; let the config file supply it
        if value is None and name in config:
            value = config[name]
        value = _convert(name, value, kind) if value is not None else default
        if value is None and required:
            flag = "--" + name.replace("_", "-")
            raise UsageError(f"{flag} is required (flag or config file)")
        opts[name] = value
    return opts


def _str_list(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


# per-subcommand option specs: name -> (type, default, required)
SPECS: dict[str, dict] = {
    "generate": {
        "out": (str, None, True),
        "seed": (int, None, True),
        "force": (bool, False, False),
        "preset": (str, None, False),
        "m": (int, 100, False),
        "v": (int, 50, False),
        "k": (int, 5, False),
        "target_mean": (float, None, False),
        "female_fraction": (float, None, False),
        "age_median": (float, None, False),
        "lda_mode": (bool, False, False),
    },
    "rates": {
        "cohort": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
        "df": (int, 4, False),
    },
    "fit": {
        "cohort": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
        "model": (str, None, True),
        "k": (int, 20, False),
        "alpha": (float, None, False),
        "beta": (float, None, False),
        "xi": (float, 2.0, False),
        "delta": (float, 0.5, False),
        "chains": (int, 2, False),
        "burnin": (int, 500, False),
        "samples": (int, 1000, False),
        "thin": (int, 1, False),
        "seed": (int, None, True),
        "rates_file": (str, None, False),
    },
    "posterior": {
        "cohort": (str, None, True),
        "fit": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
        "rates_file": (str, None, False),
    },
    "cluster": {
        "features_file": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
        "algorithms": (str, "hierarchical,kmeans,birch", False),
        "g_min": (int, 2, False),
        "g_max": (int, 6, False),
        "seed": (int, 0, False),
    },
    "survive": {
        "cohort": (str, None, True),
        "assignments": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
        "algorithm": (str, None, False),
        "g": (int, None, False),
    },
    "eci": {
        "cohort": (str, None, True),
        "mapping": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
    },
    "embed": {
        "fit": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
        "perplexity": (float, None, False),
        "tsne_iters": (int, 5000, False),
        "seed": (int, 0, False),
    },
    "pipeline": {
        "cohort": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
        "model": (str, None, True),
        "k": (int, 20, False),
        "alpha": (float, None, False),
        "beta": (float, None, False),
        "xi": (float, 2.0, False),
        "delta": (float, 0.5, False),
        "chains": (int, 2, False),
        "burnin": (int, 500, False),
        "samples": (int, 1000, False),
        "thin": (int, 1, False),
        "seed": (int, None, True),
        "rates_file": (str, None, False),
        "eci_mapping": (str, None, False),
        "algorithms": (str, "hierarchical,kmeans,birch", False),
        "g_min": (int, 2, False),
        "g_max": (int, 6, False),
        "features": (str, "posterior", False),
        "perplexity": (float, None, False),
        "tsne_iters": (int, 5000, False),
        "threads": (int, 1, False),
    },
    "replay": {
        "manifest": (str, None, True),
        "out": (str, None, True),
        "force": (bool, False, False),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diseasemix",
        description="Latent disease clusters and patient subgroups from diagnosis counts.",
    )
    parser.add_argument("--version", action="version", version=f"diseasemix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, spec in SPECS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value option file; flags override it")
        for name, (kind, default, _required) in spec.items():
            flag = "--" + name.replace("_", "-")
            if kind is bool:
                p.add_argument(flag, action="store_true", default=False)
            else:
                p.add_argument(flag, default=None)
    return parser


def _prepare_out(opts) -> Path:
    out = Path(opts["out"])
    if out.exists():
        existing = [p for p in out.iterdir()]
        if existing and not opts.get("force"):
            raise UsageError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cohort_paths(cohort_dir) -> dict[str, Path]:
    base = Path(cohort_dir)
    paths = {name: base / name for name in COHORT_FILES}
    for name, path in paths.items():
        if not path.exists():
            raise DataError(f"cohort directory {base} is missing {name}")
    return paths


def _load_cohort_dir(cohort_dir):
    paths = _cohort_paths(cohort_dir)
    vocabulary = load_vocabulary(paths["vocabulary.txt"])
    return load_cohort(paths["diagnoses.csv"], paths["demographics.csv"], vocabulary)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(opts: dict) -> None:
    out = _prepare_out(opts)
    overrides = {}
    if opts["target_mean"] is not None:
        overrides["target_mean_diagnoses"] = opts["target_mean"]
    if opts["female_fraction"] is not None:
        overrides["sex_fraction_female"] = opts["female_fraction"]
    if opts["age_median"] is not None:
        overrides["age_median"] = opts["age_median"]
    if opts["lda_mode"]:
        overrides["lda_mode"] = True
    if opts["preset"]:
        config = preset_config(opts["preset"], seed=opts["seed"], **overrides)
    else:
        config = GeneratorConfig(m=opts["m"], v=opts["v"], k=opts["k"], seed=opts["seed"],
                                 **overrides)
    cohort, truth = generate_synthetic_cohort(config)

    manifest = RunManifest(__version__, "generate", _json_opts(opts), opts["seed"])
    write_cohort(cohort, out / "diagnoses.csv", out / "demographics.csv", out / "vocabulary.txt")
    truth.rate_table.to_csv(out / "rates_true.csv")
    write_eci_mapping(default_eci_mapping(cohort.vocabulary), out / "eci_map.csv")
    _write_rows(out / "truth_theta.csv", ["patient_id", "topic", "weight"], [
        [pid, k, repr(float(truth.theta_true[m, k]))]
        for m, pid in enumerate(cohort.patient_ids()) for k in range(config.k)
    ])
    _write_rows(out / "truth_phi.csv", ["topic", "code", "weight"], [
        [k, code, repr(float(truth.phi_true[k, v]))]
        for k in range(config.k) for v, code in enumerate(cohort.vocabulary.codes)
    ])
    _write_rows(out / "truth_gamma.csv", ["patient_id", "gamma"], [
        [pid, repr(float(truth.gamma_true[m]))] for m, pid in enumerate(cohort.patient_ids())
    ])
    _write_rows(out / "truth_z.csv", ["patient_id", "code", "label"], [
        [cohort.patients[m].id, cohort.vocabulary.codes[n], int(label)]
        for m, n, label in truth.z_rows
    ])
    for name in (*COHORT_FILES, "rates_true.csv", "eci_map.csv", "truth_theta.csv",
                 "truth_phi.csv", "truth_gamma.csv", "truth_z.csv"):
        manifest.record_output(out, name)
    manifest.write(out)


def cmd_rates(opts: dict) -> None:
    out = _prepare_out(opts)
    cohort = _load_cohort_dir(opts["cohort"])
    manifest = RunManifest(__version__, "rates", _json_opts(opts), None)
    for path in _cohort_paths(opts["cohort"]).values():
        manifest.record_input(path)
    bins = bin_exposure(cohort)
    model = PoissonRateModel(df=opts["df"]).fit(bins, codes=cohort.vocabulary.codes)
    model.export_fit_csv(out / "rate_fit.csv")
    model.to_rate_table().to_csv(out / "rate_table.csv")
    manifest.record_output(out, "rate_fit.csv")
    manifest.record_output(out, "rate_table.csv")
    manifest.write(out)


def _fit_model(cohort, opts, rates_file):
    model_name = opts["model"]
    if model_name == "lda":
        est = LatentDirichletGibbs(
            n_topics=opts["k"], alpha=opts["alpha"],
            beta=0.01 if opts["beta"] is None else opts["beta"],
            chains=opts["chains"], burn_in=opts["burnin"], samples=opts["samples"],
            thin=opts["thin"], seed=opts["seed"],
        )
        est.fit(cohort)
        return est.fit_, None
    if model_name == "pdm":
        if rates_file is None:
            raise UsageError(
                "--rates-file is required for the pdm model; "
                "run the `rates` subcommand to produce rate_table.csv"
            )
        expected = RateTable.from_csv(rates_file).predict_expected(cohort)
        est = PoissonDirichletModel(
            n_topics=opts["k"],
            alpha=1.0 if opts["alpha"] is None else opts["alpha"],
            beta=1.0 if opts["beta"] is None else opts["beta"],
            xi=opts["xi"], delta=opts["delta"], chains=opts["chains"],
            burn_in=opts["burnin"], samples=opts["samples"], thin=opts["thin"],
            seed=opts["seed"],
        )
        est.fit(cohort, expected)
        return est.fit_, expected
    raise UsageError(f"unknown model {model_name!r}; choose lda or pdm")


def _write_fit_outputs(out, fit: TopicFit, manifest: RunManifest) -> None:
    write_theta_csv(out / "theta.csv", fit)
    write_phi_csv(out / "phi.csv", fit)
    write_diagnostics_csv(out / "diagnostics.csv", fit)
    names = ["theta.csv", "phi.csv", "diagnostics.csv"]
    if fit.gamma is not None:
        write_gamma_csv(out / "gamma.csv", fit)
        write_acceptance_csv(out / "acceptance.csv", fit)
        names += ["gamma.csv", "acceptance.csv"]
    for name in names:
        manifest.record_output(out, name)


def cmd_fit(opts: dict) -> None:
    out = _prepare_out(opts)
    cohort = _load_cohort_dir(opts["cohort"])
    manifest = RunManifest(__version__, "fit", _json_opts(opts), opts["seed"])
    for path in _cohort_paths(opts["cohort"]).values():
        manifest.record_input(path)
    if opts["rates_file"]:
        manifest.record_input(opts["rates_file"])
    fit, _ = _fit_model(cohort, opts, opts["rates_file"])
    _write_fit_outputs(out, fit, manifest)
    manifest.write(out)


def _load_fit_dir(fit_dir, cohort):
    base = Path(fit_dir)
    fit_manifest = RunManifest.read(base / MANIFEST_NAME)
    model = fit_manifest.config.get("model")
    ids, theta = read_theta_csv(base / "theta.csv")
    codes, phi = read_phi_csv(base / "phi.csv")
    if cohort is not None:
        if ids != cohort.patient_ids():
            raise DataError("fit theta.csv patients do not match the cohort")
        if codes != list(cohort.vocabulary.codes):
            raise DataError("fit phi.csv codes do not match the cohort vocabulary")
    gamma = None
    if (base / "gamma.csv").exists():
        gamma_map = read_gamma_csv(base / "gamma.csv")
        gamma = np.array([gamma_map[pid] for pid in ids])
    fit = TopicFit(
        theta=theta / theta.sum(axis=1, keepdims=True),
        phi=phi / phi.sum(axis=1, keepdims=True),
        loglik_traces=[], model=model or ("pdm" if gamma is not None else "lda"),
        patient_ids=tuple(ids), codes=tuple(codes), gamma=gamma,
    )
    return fit


def cmd_posterior(opts: dict) -> None:
    out = _prepare_out(opts)
    cohort = _load_cohort_dir(opts["cohort"])
    manifest = RunManifest(__version__, "posterior", _json_opts(opts), None)
    for path in _cohort_paths(opts["cohort"]).values():
        manifest.record_input(path)
    fit = _load_fit_dir(opts["fit"], cohort)
    if fit.model == "pdm":
        if not opts["rates_file"]:
            raise UsageError("--rates-file is required to compute the pdm posterior")
        manifest.record_input(opts["rates_file"])
        expected = RateTable.from_csv(opts["rates_file"]).predict_expected(cohort)
        posterior = patient_topic_posterior_pdm(fit, cohort, expected)
    else:
        posterior = patient_topic_posterior(fit, cohort)
    _write_rows(out / "posterior.csv", ["patient_id", "topic", "weight"], [
        [pid, k, repr(float(posterior[m, k]))]
        for m, pid in enumerate(fit.patient_ids) for k in range(posterior.shape[1])
    ])
    manifest.record_output(out, "posterior.csv")
    manifest.write(out)


def cmd_cluster(opts: dict) -> None:
    out = _prepare_out(opts)
    manifest = RunManifest(__version__, "cluster", _json_opts(opts), opts["seed"])
    manifest.record_input(opts["features_file"])
    ids, X = read_theta_csv(opts["features_file"])
    result = sweep_subgroups(
        X, algorithms=_str_list(opts["algorithms"]),
        g_range=range(opts["g_min"], opts["g_max"] + 1), seed=opts["seed"],
    )
    rows = []
    for (alg, g), assignment in sorted(result.assignments.items()):
        for pid, label in zip(ids, assignment.labels):
            rows.append([pid, alg, g, int(label)])
    _write_rows(out / "assignments.csv", ["patient_id", "algorithm", "G", "label"], rows)
    manifest.record_output(out, "assignments.csv")
    if result.errors:
        _write_rows(out / "cluster_errors.csv", ["algorithm", "G", "error"], [
            [alg, g, msg] for (alg, g), msg in sorted(result.errors.items())
        ])
        manifest.record_output(out, "cluster_errors.csv")
    manifest.write(out)


def _read_assignments(path) -> dict[tuple[str, int], dict[str, int]]:
    cells: dict[tuple[str, int], dict[str, int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["patient_id", "algorithm", "G", "label"]:
            raise DataError(f"{path}: expected header patient_id,algorithm,G,label")
        for row in reader:
            if len(row) != 4:
                raise DataError(f"{path}:{reader.line_num}: expected 4 fields")
            pid, alg, g_s, label_s = row
            cells.setdefault((alg, int(g_s)), {})[pid] = int(label_s)
    if not cells:
        raise DataError(f"{path}: empty assignments file")
    return cells


def _p_value_grid(cohort, cells):
    times, events = cohort.survival_arrays()
    ids = cohort.patient_ids()
    rows = []
    for (alg, g), mapping in sorted(cells.items()):
        try:
            labels = np.array([mapping[pid] for pid in ids])
        except KeyError as exc:
            raise DataError(f"assignment cell ({alg}, {g}) is missing patient {exc}") from None
        try:
            res = log_rank_test(times, events, labels)
            rows.append([alg, g, repr(res.chi_square), res.degrees_of_freedom,
                         repr(res.p_value), ""])
        except DiseasemixError as exc:
            rows.append([alg, g, "", "", "", str(exc)])
    return rows


def _write_km_outputs(out, cohort, labels, manifest) -> None:
    times, events = cohort.survival_arrays()
    curves = {}
    rows = []
    for g in np.unique(labels):
        sel = labels == g
        curve = kaplan_meier(times[sel], events[sel])
        curves[int(g)] = curve
        for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
            rows.append([int(g), repr(float(t)), repr(float(s)), int(n), int(d)])
    _write_rows(out / "km_curves.csv", ["subgroup", "time", "survival", "at_risk", "events"], rows)
    km_curves_svg(curves, max_time=float(times.max()), path=out / "km.svg")
    manifest.record_output(out, "km_curves.csv")
    manifest.record_output(out, "km.svg")


def cmd_survive(opts: dict) -> None:
    out = _prepare_out(opts)
    cohort = _load_cohort_dir(opts["cohort"])
    manifest = RunManifest(__version__, "survive", _json_opts(opts), None)
    for path in _cohort_paths(opts["cohort"]).values():
        manifest.record_input(path)
    manifest.record_input(opts["assignments"])
    cells = _read_assignments(opts["assignments"])
    rows = _p_value_grid(cohort, cells)
    _write_rows(out / "p_grid.csv",
                ["algorithm", "G", "chi_square", "degrees_of_freedom", "p_value", "error"], rows)
    manifest.record_output(out, "p_grid.csv")
    if opts["algorithm"] is not None and opts["g"] is not None:
        key = (opts["algorithm"], opts["g"])
        if key not in cells:
            raise DataError(f"assignments file has no cell for {key}")
        labels = np.array([cells[key][pid] for pid in cohort.patient_ids()])
        _write_km_outputs(out, cohort, labels, manifest)
    manifest.write(out)


def cmd_eci(opts: dict) -> None:
    out = _prepare_out(opts)
    cohort = _load_cohort_dir(opts["cohort"])
    manifest = RunManifest(__version__, "eci", _json_opts(opts), None)
    for path in _cohort_paths(opts["cohort"]).values():
        manifest.record_input(path)
    manifest.record_input(opts["mapping"])
    mapping = load_eci_mapping(opts["mapping"])
    from .stats import ECI_CATEGORIES

    rows = []
    for m, pid in enumerate(cohort.patient_ids()):
        profile = eci_profile(cohort.counts[m], cohort.vocabulary, mapping)
        rows.append([pid, profile.score, profile.band]
                    + [int(profile.flags[c]) for c in ECI_CATEGORIES])
    _write_rows(out / "eci.csv", ["patient_id", "score", "band", *ECI_CATEGORIES], rows)
    manifest.record_output(out, "eci.csv")
    manifest.write(out)


def cmd_embed(opts: dict) -> None:
    out = _prepare_out(opts)
    fit = _load_fit_dir(opts["fit"], cohort=None)
    manifest = RunManifest(__version__, "embed", _json_opts(opts), opts["seed"])
    manifest.record_input(Path(opts["fit"]) / "phi.csv")
    perplexity = opts["perplexity"]
    if perplexity is None:
        perplexity = 10.0 if fit.model == "pdm" else 20.0
    tsne = ExactTsne(perplexity=perplexity, n_iter=opts["tsne_iters"], seed=opts["seed"])
    embedding = tsne.fit_transform(fit.phi.T)
    export_embedding(embedding, fit.codes, out / "embedding.csv", out / "embedding.svg")
    _write_rows(out / "kl_trace.csv", ["iteration", "kl"], [
        [it, repr(kl)] for it, kl in tsne.kl_trace_
    ])
    for name in ("embedding.csv", "embedding.svg", "kl_trace.csv"):
        manifest.record_output(out, name)
    manifest.write(out)


def cmd_pipeline(opts: dict) -> None:
    out = _prepare_out(opts)
    manifest = RunManifest(__version__, "pipeline", _json_opts(opts), opts["seed"])
    stage = "load"
    try:
        cohort = _load_cohort_dir(opts["cohort"])
        for path in _cohort_paths(opts["cohort"]).values():
            manifest.record_input(path)

        expected = None
        if opts["model"] == "pdm":
            stage = "rates"
            if opts["rates_file"]:
                manifest.record_input(opts["rates_file"])
                table = RateTable.from_csv(opts["rates_file"])
            else:
                rate_model = PoissonRateModel().fit(
                    bin_exposure(cohort), codes=cohort.vocabulary.codes
                )
                rate_model.export_fit_csv(out / "rate_fit.csv")
                manifest.record_output(out, "rate_fit.csv")
                table = rate_model.to_rate_table()
            table.to_csv(out / "rate_table.csv")
            manifest.record_output(out, "rate_table.csv")
            expected = table.predict_expected(cohort)

        stage = "fit"
        if opts["model"] == "pdm":
            fit = _fit_pdm_direct(cohort, opts, expected)
        else:
            fit, _ = _fit_model(cohort, opts, None)
        _write_fit_outputs(out, fit, manifest)

        stage = "posterior"
        if fit.model == "pdm":
            posterior = patient_topic_posterior_pdm(fit, cohort, expected)
        else:
            posterior = patient_topic_posterior(fit, cohort)
        _write_rows(out / "posterior.csv", ["patient_id", "topic", "weight"], [
            [pid, k, repr(float(posterior[m, k]))]
            for m, pid in enumerate(fit.patient_ids) for k in range(posterior.shape[1])
        ])
        manifest.record_output(out, "posterior.csv")

        stage = "cluster"
        features = posterior if opts["features"] == "posterior" else fit.theta
        result = sweep_subgroups(
            features, algorithms=_str_list(opts["algorithms"]),
            g_range=range(opts["g_min"], opts["g_max"] + 1), seed=opts["seed"],
            n_jobs=opts["threads"],
        )
        rows = []
        for (alg, g), assignment in sorted(result.assignments.items()):
            for pid, label in zip(fit.patient_ids, assignment.labels):
                rows.append([pid, alg, g, int(label)])
        _write_rows(out / "assignments.csv", ["patient_id", "algorithm", "G", "label"], rows)
        manifest.record_output(out, "assignments.csv")

        stage = "survival"
        cells = {
            (alg, g): dict(zip(fit.patient_ids, map(int, assignment.labels)))
            for (alg, g), assignment in result.assignments.items()
        }
        grid_rows = _p_value_grid(cohort, cells)
        for (alg, g), msg in sorted(result.errors.items()):
            grid_rows.append([alg, g, "", "", "", msg])
        grid_rows.sort(key=lambda r: (r[0], int(r[1])))
        _write_rows(out / "p_grid.csv",
                    ["algorithm", "G", "chi_square", "degrees_of_freedom", "p_value", "error"],
                    grid_rows)
        manifest.record_output(out, "p_grid.csv")

        scored = [r for r in grid_rows if r[4] != ""]
        if not scored:
            raise DataError("no subgrouping produced a valid log-rank test")
        # smallest p first; ties favor fewer subgroups, then algorithm name
        best = min(scored, key=lambda r: (float(r[4]), int(r[1]), r[0]))
        selected_alg, selected_g = best[0], int(best[1])
        _write_rows(out / "selection.csv", ["algorithm", "G", "p_value"],
                    [[selected_alg, selected_g, best[4]]])
        manifest.record_output(out, "selection.csv")
        labels = np.array([cells[(selected_alg, selected_g)][pid] for pid in fit.patient_ids])
        _write_km_outputs(out, cohort, labels, manifest)

        stage = "report"
        mapping_path = opts["eci_mapping"] or str(Path(opts["cohort"]) / "eci_map.csv")
        if not Path(mapping_path).exists():
            raise DataError(
                f"no comorbidity mapping at {mapping_path}; pass --eci-mapping"
            )
        manifest.record_input(mapping_path)
        mapping = load_eci_mapping(mapping_path)
        profiles = [
            eci_profile(cohort.counts[m], cohort.vocabulary, mapping)
            for m in range(cohort.n_patients)
        ]
        report = subgroup_report(cohort, labels, profiles)
        report.write_csv(out / "report.csv")
        with open(out / "report.txt", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_text())
        manifest.record_output(out, "report.csv")
        manifest.record_output(out, "report.txt")

        stage = "embed"
        perplexity = opts["perplexity"]
        if perplexity is None:
            perplexity = 10.0 if fit.model == "pdm" else 20.0
        tsne = ExactTsne(perplexity=perplexity, n_iter=opts["tsne_iters"], seed=opts["seed"])
        embedding = tsne.fit_transform(fit.phi.T)
        export_embedding(embedding, fit.codes, out / "embedding.csv", out / "embedding.svg")
        _write_rows(out / "kl_trace.csv", ["iteration", "kl"], [
            [it, repr(kl)] for it, kl in tsne.kl_trace_
        ])
        for name in ("embedding.csv", "embedding.svg", "kl_trace.csv"):
            manifest.record_output(out, name)
    except DiseasemixError as exc:
        manifest.failed_stage = stage
        manifest.write(out)
        raise type(exc)(f"pipeline stage {stage!r} failed: {exc}") from exc
    manifest.write(out)


def _fit_pdm_direct(cohort, opts, expected) -> TopicFit:
    est = PoissonDirichletModel(
        n_topics=opts["k"],
        alpha=1.0 if opts["alpha"] is None else opts["alpha"],
        beta=1.0 if opts["beta"] is None else opts["beta"],
        xi=opts["xi"], delta=opts["delta"], chains=opts["chains"],
        burn_in=opts["burnin"], samples=opts["samples"], thin=opts["thin"],
        seed=opts["seed"],
    )
    est.fit(cohort, expected)
    return est.fit_


def cmd_replay(opts: dict) -> None:
    manifest = RunManifest.read(opts["manifest"])
    if manifest.subcommand == "replay":
        raise UsageError("cannot replay a replay manifest")
    bad = manifest.verify_inputs()
    if bad:
        raise DataError(f"inputs changed since the recorded run: {', '.join(sorted(bad))}")
    replay_opts = dict(manifest.config)
    replay_opts["out"] = opts["out"]
    replay_opts["force"] = opts.get("force", False)
    COMMANDS[manifest.subcommand](replay_opts)
    mismatched = []
    for relpath, digest in manifest.outputs.items():
        produced = Path(opts["out"]) / relpath
        if not produced.exists() or file_digest(produced) != digest:
            mismatched.append(relpath)
    if mismatched:
        raise NumericalError(
            f"replay did not reproduce output digests: {', '.join(sorted(mismatched))}"
        )
    print(f"replay ok: {len(manifest.outputs)} outputs reproduced")


def _json_opts(opts: dict) -> dict:
    return {k: v for k, v in opts.items() if k != "force"}


COMMANDS = {
    "generate": cmd_generate,
    "rates": cmd_rates,
    "fit": cmd_fit,
    "posterior": cmd_posterior,
    "cluster": cmd_cluster,
    "survive": cmd_survive,
    "eci": cmd_eci,
    "embed": cmd_embed,
    "pipeline": cmd_pipeline,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = _parse_config_file(args.config) if args.config else {}
    try:
        opts = _resolve(args, config, SPECS[args.command])
        COMMANDS[args.command](opts)
        return 0
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
