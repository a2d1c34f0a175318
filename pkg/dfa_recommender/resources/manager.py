"""
Artifact store for experiment runs.
Lays out a run directory and reads and writes every file a command produces:
manifests, id indices, rating CSVs, draw files, merge manifests, estimates,
reports and chart specifications.
"""
import hashlib
import json
import logging
import os
from datetime import datetime
from importlib import metadata as importlib_metadata
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..model.consensus import FilterRule, GlobalRho, ShardPlan
from ..model.core import McmcDraw, RatingMatrix
from ..data.processor import IdIndex, RatingsProcessor
from . import formats

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
MERGE_MANIFEST = "merge_manifest.json"
INDEX = "index.json"
DRAWS = "draws.txt"
TRACKED_PACKAGES = ("dfa-recommender", "numpy", "scipy", "pandas", "joblib")


def config_hash(config: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a resolved configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = importlib_metadata.version(name)
        except importlib_metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class ArtifactStore:
    """
    Manages the files of one run directory:
    - manifest and merge manifest (JSON)
    - id index mapping dense indices back to original ids
    - ratings, predictions and reports (CSV)
    - draw files, estimates and chart specifications
    """

    def __init__(self, run_dir: str):
        """
        Initialize the store, creating the run directory if needed.

        Args:
            run_dir: Directory holding the run's artifacts
        """
        self.run_dir = run_dir
        self.shard_dir = os.path.join(run_dir, "shards")
        self.estimate_dir = os.path.join(run_dir, "estimates")
        os.makedirs(run_dir, exist_ok=True)
        logger.debug(f"Initialized artifact store in {run_dir}")

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)

    def exists(self, *parts: str) -> bool:
        return os.path.exists(self.path(*parts))

    def _write_json(self, name: str, payload: Dict[str, Any]) -> str:
        filepath = self.path(name)
        with open(filepath, "w") as f:
            json.dump(payload, f, indent=2)
        logger.info(f"Wrote {filepath}")
        return filepath

    def _read_json(self, name: str) -> Dict[str, Any]:
        with open(self.path(name)) as f:
            return json.load(f)

    def write_manifest(self, command: str, config: Dict[str, Any], seed: int,
                       extra: Optional[Dict[str, Any]] = None, name: str = MANIFEST) -> str:
        """
        Record what produced this run

        Args:
            command: CLI command name
            config: Resolved configuration as a plain dict
            seed: Master seed
            extra: Command-specific fields
            name: File name inside the run directory

        Returns:
            Path to the manifest
        """
        payload = {
            "command": command,
            "config_hash": config_hash(config),
            "seed": seed,
            "versions": package_versions(),
            "created_at": self._get_timestamp(),
            "config": config,
        }
        payload.update(extra or {})
        return self._write_json(name, payload)

    def read_manifest(self) -> Dict[str, Any]:
        return self._read_json(MANIFEST)

    def write_index(self, index: IdIndex) -> str:
        return self._write_json(INDEX, index)

    def read_index(self) -> Optional[IdIndex]:
        return self._read_json(INDEX) if self.exists(INDEX) else None

    def write_ratings(self, name: str, ratings: RatingMatrix, index: Optional[IdIndex] = None) -> str:
        """Write ``user,item,rating`` with original ids, or 1-based dense ids without an index."""
        if index is not None:
            df = RatingsProcessor.to_original_ids(ratings.to_frame(), index)
        else:
            df = ratings.to_frame(one_based=True)
        return self.write_frame(name, df)

    def write_frame(self, name: str, df: pd.DataFrame) -> str:
        filepath = self.path(name)
        df.to_csv(filepath, index=False)
        logger.info(f"Wrote {len(df)} rows to {filepath}")
        return filepath

    def write_draws(self, draws: Sequence[McmcDraw], m: int, n: int, name: str = DRAWS) -> str:
        return formats.write_draws(self.path(name), draws, m, n)

    def read_draws(self, name: str = DRAWS) -> Tuple[int, int, List[McmcDraw]]:
        return formats.read_draws(self.path(name))

    def shard_draw_name(self, shard: int) -> str:
        return os.path.join("shards", f"shard_{shard:02d}.txt")

    def write_shard_draws(self, shard_draws: Sequence[Sequence[McmcDraw]], plan: ShardPlan, n: int) -> List[str]:
        os.makedirs(self.shard_dir, exist_ok=True)
        return [self.write_draws(draws, len(plan.shards[s]), n, self.shard_draw_name(s))
                for s, draws in enumerate(shard_draws)]

    def read_shard_draws(self, S: int) -> List[List[McmcDraw]]:
        return [self.read_draws(self.shard_draw_name(s))[2] for s in range(S)]

    def write_merge_manifest(self, plan: ShardPlan, seeds: Sequence[Dict[str, Any]], global_rho: GlobalRho,
                             rule: FilterRule, mode: str, rho_prior: Tuple[float, float]) -> str:
        payload = {
            "S": plan.S,
            "assignment": plan.assignment.tolist(),
            "shards": [list(users) for users in plan.shards],
            "seeds": list(seeds),
            "rho_mean": [float(v) for v in global_rho.mean],
            "rho_sd": [float(v) for v in global_rho.sd],
            "rho_prior": [float(v) for v in rho_prior],
            "filter": rule.describe(),
            "resample_mode": mode,
        }
        return self._write_json(MERGE_MANIFEST, payload)

    def read_merge_manifest(self) -> Dict[str, Any]:
        """Merge manifest with ``plan``, ``global_rho`` and ``rule`` rebuilt as objects."""
        payload = self._read_json(MERGE_MANIFEST)
        payload["plan"] = ShardPlan(len(payload["assignment"]), tuple(tuple(s) for s in payload["shards"]))
        payload["global_rho"] = GlobalRho(np.array(payload["rho_mean"]), np.array(payload["rho_sd"]))
        rule = payload["filter"]
        payload["rule"] = FilterRule(epsilon=rule["epsilon"], keep_fraction=None) if rule["mode"] == "epsilon" \
            else FilterRule(keep_fraction=rule["keep_fraction"])
        return payload

    def write_estimates(self, A_hat: np.ndarray, B_hat: np.ndarray, theta_hat: np.ndarray,
                        prefix: str = "") -> List[str]:
        os.makedirs(self.estimate_dir, exist_ok=True)
        return [
            formats.write_bit_matrix(os.path.join(self.estimate_dir, f"{prefix}A_hat.txt"), A_hat),
            formats.write_bit_matrix(os.path.join(self.estimate_dir, f"{prefix}B_hat.txt"), B_hat),
            formats.write_vector(os.path.join(self.estimate_dir, f"{prefix}theta_hat.txt"), theta_hat),
        ]

    def export_chart(self, name: str, spec: Dict[str, Any]) -> str:
        """Write a Vega-Lite specification next to its plot data."""
        return self._write_json(f"{name}.vl.json", spec)

    def _get_timestamp(self) -> str:
        """Get current timestamp as ISO format string."""
        return datetime.now().isoformat()
