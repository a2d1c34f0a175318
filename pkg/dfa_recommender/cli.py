"""
Command-line surface.

    dfa-recommender simulate   --out DIR
    dfa-recommender train      --data ratings.csv --out RUN
    dfa-recommender train-cmc  --data ratings.csv --out RUN --shards 15
    dfa-recommender predict    --run RUN [--queries test.csv]
    dfa-recommender eval       --predictions P --truth T [--run RUN]
    dfa-recommender summarize  --run RUN [--truth truth.txt]
    dfa-recommender mf         --data train.csv --test test.csv --out DIR
    dfa-recommender tradeoff   --m 6000 --n 200 --shards-list 1,5,10,15,20,30 --out DIR

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error.
"""
import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .config import ExperimentConfig
from .data.loader import RatingsLoader, ingest_ratings
from .data.processor import IdIndex, RatingsProcessor
from .data.simulate import generate_dataset, holdout_split
from .evaluation.predict import (EvalReport, PairwiseResult, exact_accuracy, pairwise_preference_eval,
                                 predictive_distribution, rmse, within_k_star_accuracy)
from .evaluation.summarize import (conditional_estimates, dahl_draw, k_trace, map_K, min_hamming_distance,
                                   pad_columns, tradeoff_frame, tradeoff_table)
from .exceptions import DfaError, DomainError
from .model.baseline_mf import cv_select_rank, predict_mf_many, round_ratings, train_mf
from .model.consensus import (ShardPlan, derive_seed, merge_rho, merged_predict, restrict_users, run_shards,
                              shard_chain_config, shard_moments, split_users)
from .model.core import McmcDraw, RatingMatrix
from .model.sampler import run_chain
from .resources import formats
from .resources.manager import MANIFEST, ArtifactStore
from .visualization.vega_lite import ChartSpecBuilder

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _output(path: str) -> Tuple[ArtifactStore, str]:
    return ArtifactStore(os.path.dirname(path) or "."), os.path.basename(path)


def _seed_record(seed) -> Dict[str, Any]:
    return {"entropy": seed.entropy, "spawn_key": list(seed.spawn_key)}


class ExperimentRunner:
    """
    Runs the command-line workflows for one resolved configuration.
    """

    def __init__(self, config: ExperimentConfig):
        """
        Initialize the runner.

        Args:
            config: Resolved experiment configuration
        """
        self.config = config
        self.charts = ChartSpecBuilder()

    # data helpers

    def _ingest(self, path: str, index: Optional[IdIndex] = None,
                filtered: bool = True) -> Tuple[RatingMatrix, IdIndex]:
        cfg = self.config
        ratings, metadata = ingest_ratings(
            path, cfg.data_format if filtered else "csv", cfg.query if filtered else None, index,
            cfg.top_items if filtered else None, cfg.min_user_ratings if filtered else None,
        )
        return ratings, metadata["index"]

    def _prepare_training(self, store: ArtifactStore, data: str) -> RatingMatrix:
        ratings, index = self._ingest(data)
        store.write_index(index)
        if self.config.holdout is not None:
            train, test = holdout_split(ratings, self.config.holdout, _rng(self.config.seed_for("holdout")))
            store.write_ratings("test.csv", test, index)
        else:
            train = ratings
        store.write_ratings("train.csv", train, index)
        return train

    def _manifest(self, store: ArtifactStore, command: str, name: str = MANIFEST, **extra) -> str:
        return store.write_manifest(command, self.config.to_dict(), self.config.seed, extra, name=name)

    # commands

    def cmd_simulate(self, args: argparse.Namespace) -> int:
        cfg = self.config
        store = ArtifactStore(args.out)
        truth, ratings = generate_dataset(
            cfg.sim_m, cfg.sim_n, cfg.sim_lam, cfg.sim_pB, cfg.sim_theta_sd, cfg.sim_tau, cfg.b0,
            cfg.sim_include_rho, _rng(cfg.seed_for("simulate")),
        )
        train, test = holdout_split(ratings, cfg.sim_holdout, _rng(cfg.seed_for("simulate", purpose=1)))
        store.write_ratings("ratings.csv", ratings)
        store.write_ratings("train.csv", train)
        store.write_ratings("test.csv", test)
        truth_draw = McmcDraw(truth.allocation, truth.params, 0, cfg.sim_pB)
        store.write_draws([truth_draw], ratings.m, ratings.n, "truth.txt")
        self._manifest(store, "simulate", m=ratings.m, n=ratings.n, true_K=truth.K)
        return EXIT_OK

    def cmd_train(self, args: argparse.Namespace) -> int:
        store = ArtifactStore(args.out)
        train = self._prepare_training(store, args.data)
        if train.n_obs == 0:
            raise DomainError("training data holds no ratings")
        draws = run_chain(train, self.config.chain_config())
        store.write_draws(draws, train.m, train.n)
        self._manifest(store, "train", mode="single", m=train.m, n=train.n, n_draws=len(draws))
        return EXIT_OK

    def cmd_train_cmc(self, args: argparse.Namespace) -> int:
        cfg = self.config
        store = ArtifactStore(args.out)
        train = self._prepare_training(store, args.data)
        cmc = cfg.cmc_config()
        plan = split_users(train.m, cmc.S, cmc.strategy, cfg.seed)
        shard_draws = run_shards(train, plan, cmc, cfg.jobs)

        before = [shard_moments(draws, s, restrict_users(train, plan.shards[s]))
                  for s, draws in enumerate(shard_draws)]
        global_rho = merge_rho(before, cmc.rho_prior)
        store.write_shard_draws(shard_draws, plan, train.n)
        seeds = [_seed_record(shard_chain_config(cmc, s).seed) for s in range(plan.S)]
        store.write_merge_manifest(plan, seeds, global_rho, cmc.rule, cmc.resample_mode, cmc.rho_prior)
        self._manifest(store, "train-cmc", mode="cmc", S=plan.S, m=train.m, n=train.n)
        return EXIT_OK

    def _load_run(self, store: ArtifactStore) -> Dict[str, Any]:
        """
        Draws of a run: ``draws`` for a single chain, ``shard_draws`` plus the
        merge manifest for CMC. Merged ensembles are drawn from the run's own
        seed so predict and eval see the same ones.
        """
        manifest = store.read_manifest()
        run = {"mode": manifest.get("mode", "single"), "seed": manifest["seed"], "index": store.read_index()}
        if run["mode"] == "cmc":
            merge = store.read_merge_manifest()
            run.update(merge=merge, plan=merge["plan"], shard_draws=store.read_shard_draws(merge["S"]))
        else:
            run["draws"] = store.read_draws()[2]
        return run

    def _merged_ensembles(self, run: Dict[str, Any]) -> List[List[McmcDraw]]:
        merge = run["merge"]
        return merged_predict(run["shard_draws"], merge["global_rho"], merge["rule"],
                              _rng(derive_seed(run["seed"], "predict")), merge["resample_mode"])

    def _predict_frame(self, queries: RatingMatrix, run: Dict[str, Any], merged: bool = True) -> pd.DataFrame:
        if run["mode"] != "cmc":
            return predictive_distribution(queries.users, queries.items, run["draws"]).to_frame()

        plan: ShardPlan = run["plan"]
        ensembles = self._merged_ensembles(run) if merged else run["shard_draws"]
        assignment, local = plan.assignment, plan.local_index()
        frames = []
        for s in range(plan.S):
            rows = np.flatnonzero(assignment[queries.users] == s)
            if not rows.size:
                continue
            df = predictive_distribution(local[queries.users[rows]], queries.items[rows], ensembles[s]).to_frame()
            df["user"] = queries.users[rows]
            df["shard"] = s
            df["row"] = rows
            frames.append(df)
        return pd.concat(frames).sort_values("row").drop(columns="row").reset_index(drop=True)

    def cmd_predict(self, args: argparse.Namespace) -> int:
        store = ArtifactStore(args.run)
        run = self._load_run(store)
        queries, _ = self._ingest(args.queries or store.path("test.csv"), run["index"], filtered=False)
        df = self._predict_frame(queries, run, merged=not args.no_merge)
        out_store, name = _output(args.out or store.path("predictions.csv"))
        out_store.write_frame(name, RatingsProcessor.to_original_ids(df, run["index"]))
        self._manifest(store, "predict", name="predict.manifest.json", queries=queries.n_obs, merged=not args.no_merge)
        return EXIT_OK

    def _accuracy_rows(self, report: EvalReport, truth: np.ndarray, predicted: np.ndarray, shard="all",
                       suffix: str = "") -> None:
        within = within_k_star_accuracy(truth, predicted, k=1)
        report.add(f"exact_accuracy{suffix}", exact_accuracy(truth, predicted), truth.size, shard)
        report.add(f"within_one_accuracy{suffix}", within.value, within.n, shard, (within.ci_lo, within.ci_hi))

    def _run_comparisons(self, report: EvalReport, store: ArtifactStore, truth_path: str) -> None:
        """Pairwise preference accuracy, and for CMC runs per-shard accuracy before and after merging."""
        run = self._load_run(store)
        train, _ = self._ingest(store.path("train.csv"), run["index"], filtered=False)
        test, _ = self._ingest(truth_path, run["index"], filtered=False)
        one_per_user = test.n_obs > 0 and test.user_counts().max() <= 1

        if run["mode"] != "cmc":
            if one_per_user:
                report.add_pairwise("pairwise_accuracy", [pairwise_preference_eval(train, test, run["draws"])])
            return

        plan: ShardPlan = run["plan"]
        merged = self._merged_ensembles(run)
        before: List[PairwiseResult] = []
        after: List[PairwiseResult] = []
        for s, users in enumerate(plan.shards):
            train_s, test_s = restrict_users(train, users), restrict_users(test, users)
            if test_s.n_obs == 0:
                continue
            for label, ensemble in (("before_merge", run["shard_draws"][s]), ("after_merge", merged[s])):
                predicted = predictive_distribution(test_s.users, test_s.items, ensemble).predicted()
                self._accuracy_rows(report, test_s.ratings, predicted, s, f"_{label}")
            if one_per_user:
                before.append(pairwise_preference_eval(train_s, test_s, run["shard_draws"][s], shard=s))
                after.append(pairwise_preference_eval(train_s, test_s, merged[s], shard=s))
        if one_per_user:
            report.add_pairwise("pairwise_accuracy_before_merge", before)
            report.add_pairwise("pairwise_accuracy_after_merge", after)

    def cmd_eval(self, args: argparse.Namespace) -> int:
        predictions = pd.read_csv(args.predictions)
        truth, _ = RatingsLoader.load_from_csv(args.truth)
        joined = RatingsProcessor.join_with_truth(predictions, truth)
        if joined.empty:
            raise DomainError("no prediction matches a held-out rating")

        report = EvalReport()
        y, yhat = joined["rating"].to_numpy(), joined["predicted"].to_numpy()
        self._accuracy_rows(report, y, yhat)
        report.add("rmse", rmse(y, yhat), y.size, proportion=False)
        if "shard" in joined.columns:
            for s, part in joined.groupby("shard"):
                self._accuracy_rows(report, part["rating"].to_numpy(), part["predicted"].to_numpy(), int(s))
        if args.run:
            self._run_comparisons(report, ArtifactStore(args.run), args.truth)

        out_store, name = _output(args.out or os.path.join(args.run or os.path.dirname(args.predictions) or ".", "report.csv"))
        frame = report.to_frame()
        out_store.write_frame(name, frame)
        per_shard = frame[frame["shard"] != "all"]
        if not per_shard.empty:
            out_store.write_frame("shard_accuracy.csv", per_shard)
            out_store.export_chart("shard_accuracy", self.charts.create_chart("shard_accuracy", per_shard))
        for row in report.rows:
            if row["shard"] == "all":
                logger.info(f"{row['metric']}: {row['value']:.4f} (n={row['n']})")
        self._manifest(out_store, "eval", name="eval.manifest.json", predictions=args.predictions, truth=args.truth)
        return EXIT_OK

    def cmd_summarize(self, args: argparse.Namespace) -> int:
        store = ArtifactStore(args.run)
        run = self._load_run(store)
        if run["mode"] == "cmc":
            if not 0 <= args.shard < run["plan"].S:
                raise DomainError(f"shard must lie in [0, {run['plan'].S}), got {args.shard}")
            draws, prefix = run["shard_draws"][args.shard], f"shard_{args.shard:02d}_"
        else:
            draws, prefix = run["draws"], ""
        if not draws:
            raise DomainError("the run stored no draws")

        medoid = dahl_draw(draws)
        A_hat = np.asarray(medoid.allocation.A)
        B_hat, theta_hat = conditional_estimates(draws, A_hat)
        store.write_estimates(A_hat, B_hat, theta_hat, prefix)

        trace = k_trace(draws)
        store.write_frame(f"{prefix}k_trace.csv", trace)
        store.export_chart(f"{prefix}k_trace", self.charts.create_chart("k_trace", trace))

        summary = {"map_K": map_K(draws), "n_draws": len(draws), "dahl_iteration": medoid.iteration}
        if args.truth:
            _, _, truth_draws = formats.read_draws(args.truth)
            true_A = np.asarray(truth_draws[0].allocation.A)
            if true_A.shape[0] != A_hat.shape[0]:
                raise DomainError(f"truth has {true_A.shape[0]} users, estimate has {A_hat.shape[0]}")
            K = max(true_A.shape[1], A_hat.shape[1])
            distance = min_hamming_distance(pad_columns(true_A, K), pad_columns(A_hat, K))
            summary.update(true_K=true_A.shape[1], hamming_to_truth=distance,
                           hamming_fraction=distance / max(true_A.shape[0] * K, 1))
        store.write_frame(f"{prefix}summary.csv", pd.DataFrame([summary]))
        logger.info(f"MAP K={summary['map_K']} from {len(draws)} draws")
        self._manifest(store, "summarize", name="summarize.manifest.json", **summary)
        return EXIT_OK

    def cmd_mf(self, args: argparse.Namespace) -> int:
        cfg = self.config
        store = ArtifactStore(args.out)
        train, index = self._ingest(args.data)
        store.write_index(index)
        k, lam_p, lam_q = cv_select_rank(train, cfg.mf_k_grid, cfg.mf_lambda_grid, cfg.mf_folds,
                                         _rng(cfg.seed_for("mf")), cfg.mf_lr, cfg.mf_epochs)
        model = train_mf(train, k, lam_p, lam_q, cfg.mf_lr, cfg.mf_epochs, _rng(cfg.seed_for("mf", purpose=1)))
        formats.write_mf_model(store.path("mf_model.txt"), model)

        if args.test:
            test, _ = self._ingest(args.test, index, filtered=False)
            scores = predict_mf_many(model, test.users, test.items)
            predicted = round_ratings(scores)
            df = pd.DataFrame({"user": test.users, "item": test.items, "predicted": predicted, "score": scores})
            store.write_frame("mf_predictions.csv", RatingsProcessor.to_original_ids(df, index))

            report = EvalReport()
            self._accuracy_rows(report, test.ratings, predicted)
            report.add("rmse", rmse(test.ratings, scores), test.n_obs, proportion=False)
            store.write_frame("mf_report.csv", report.to_frame())
            logger.info(f"MF test RMSE {report.value('rmse'):.4f}, exact accuracy {report.value('exact_accuracy'):.4f}")
        self._manifest(store, "mf", k=k, lambda_P=lam_p, lambda_Q=lam_q)
        return EXIT_OK

    def cmd_tradeoff(self, args: argparse.Namespace) -> int:
        store = ArtifactStore(args.out)
        frame = tradeoff_frame(tradeoff_table(args.m, args.n, args.shards_list))
        store.write_frame("tradeoff.csv", frame)
        store.export_chart("tradeoff", self.charts.create_chart("tradeoff", frame))
        self._manifest(store, "tradeoff", m=args.m, n=args.n, S_values=list(args.shards_list))
        return EXIT_OK


def _flag(name: str):
    """argparse type that parses a flag the same way as the config file."""
    def parse(text: str):
        return ExperimentConfig.parse_value(name, text)
    parse.__name__ = name
    return parse


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _add_flags(parser: argparse.ArgumentParser, names: Sequence[str]) -> None:
    for name in names:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, type=_flag(name), default=argparse.SUPPRESS)


DATA_FLAGS = ("data_format", "query", "top_items", "min_user_ratings", "holdout")
CHAIN_FLAGS = ("iterations", "burn_in", "thin", "init", "lam", "pB", "pB_prior", "sigma0_theta", "tau_prior",
               "rho_mu0", "rho_sigma0", "b0", "new_feature_rate")
CMC_FLAGS = ("shards", "jobs", "split", "keep_fraction", "epsilon", "resample_mode")
MF_FLAGS = ("mf_k_grid", "mf_lambda_grid", "mf_folds", "mf_lr", "mf_epochs")
SIM_FLAGS = ("sim_m", "sim_n", "sim_lam", "sim_pB", "sim_theta_sd", "sim_tau", "sim_holdout", "b0")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value configuration file")
    common.add_argument("--seed", type=_flag("seed"), default=argparse.SUPPRESS, help="master seed (overrides DFA_SEED)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="dfa-recommender",
                                     description="Double feature allocation recommender with consensus Monte Carlo")
    commands = parser.add_subparsers(dest="command", required=True)

    sim = commands.add_parser("simulate", parents=[common], help="generate a synthetic dataset with its truth")
    sim.add_argument("--out", required=True)
    _add_flags(sim, SIM_FLAGS)
    sim.add_argument("--include-rho", dest="sim_include_rho", action="store_true", default=argparse.SUPPRESS)

    for name, flags, help_text in (("train", (), "run one chain"),
                                   ("train-cmc", CMC_FLAGS, "run one chain per user shard and merge rho")):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("--data", required=True, help="ratings CSV, or database URL with --data-format sql")
        sub.add_argument("--out", required=True)
        _add_flags(sub, DATA_FLAGS + CHAIN_FLAGS + MF_FLAGS + tuple(flags))

    pred = commands.add_parser("predict", parents=[common], help="posterior predictive ratings for queries")
    pred.add_argument("--run", required=True)
    pred.add_argument("--queries", help="user,item,rating CSV (defaults to the run's test.csv)")
    pred.add_argument("--out", help="predictions CSV (defaults to RUN/predictions.csv)")
    pred.add_argument("--no-merge", action="store_true", help="predict from the shard draws without merging rho")

    ev = commands.add_parser("eval", parents=[common], help="accuracy of predictions against held-out ratings")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--run", help="run directory for pairwise and before/after-merge comparisons")
    ev.add_argument("--out", help="report CSV")

    summ = commands.add_parser("summarize", parents=[common], help="MAP K, Dahl estimate and K trace")
    summ.add_argument("--run", required=True)
    summ.add_argument("--shard", type=int, default=0)
    summ.add_argument("--truth", help="truth draw file written by simulate")

    mf = commands.add_parser("mf", parents=[common], help="matrix factorization baseline")
    mf.add_argument("--data", required=True)
    mf.add_argument("--test")
    mf.add_argument("--out", required=True)
    _add_flags(mf, DATA_FLAGS[:4] + MF_FLAGS)

    trade = commands.add_parser("tradeoff", parents=[common], help="cost and standard error against shard count")
    trade.add_argument("--m", type=int, required=True)
    trade.add_argument("--n", type=int, required=True)
    trade.add_argument("--shards-list", type=_int_list, default=(1, 5, 10, 15, 20, 30))
    trade.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "simulate": ExperimentRunner.cmd_simulate,
    "train": ExperimentRunner.cmd_train,
    "train-cmc": ExperimentRunner.cmd_train_cmc,
    "predict": ExperimentRunner.cmd_predict,
    "eval": ExperimentRunner.cmd_eval,
    "summarize": ExperimentRunner.cmd_summarize,
    "mf": ExperimentRunner.cmd_mf,
    "tradeoff": ExperimentRunner.cmd_tradeoff,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; argparse exits with status 2 on usage errors."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = ExperimentConfig.resolve(args.config, vars(args))
        return COMMANDS[args.command](ExperimentRunner(config), args)
    except (DfaError, OSError) as e:
        logger.error(f"{args.command} failed: {str(e)}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
