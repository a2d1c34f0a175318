"""
Rating table processing: the data-cleaning filters applied before model
fitting, dense re-indexing of raw ids, and joins of predictions with truth.
"""
import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from ..exceptions import DomainError
from ..model.core import RatingMatrix

logger = logging.getLogger(__name__)

RATING_COLUMNS = ["user", "item", "rating"]

IdIndex = Dict[str, List[Any]]


class RatingsProcessor:
    """
    Transforms raw ``user,item,rating`` frames into model-ready form.
    """

    @staticmethod
    def filter_top_items(df: pd.DataFrame, top_items: int) -> pd.DataFrame:
        """
        Keep ratings of the ``top_items`` most rated items

        Args:
            df: Frame with ``user``, ``item`` and ``rating`` columns
            top_items: Number of items to keep; ties in rating count go to the smaller id

        Returns:
            Filtered DataFrame
        """
        if top_items < 1:
            raise DomainError(f"top_items must be positive, got {top_items}")
        counts = df.groupby("item").size().reset_index(name="count")
        counts = counts.sort_values(["count", "item"], ascending=[False, True], kind="stable")
        keep = set(counts["item"].head(top_items))
        filtered = df[df["item"].isin(keep)]
        logger.info(f"Kept {len(keep)} most rated items: {len(df)} -> {len(filtered)} ratings")
        return filtered

    @staticmethod
    def filter_min_user_ratings(df: pd.DataFrame, min_ratings: int) -> pd.DataFrame:
        """
        Keep users with at least ``min_ratings`` ratings

        Args:
            df: Frame with ``user``, ``item`` and ``rating`` columns
            min_ratings: Minimum number of ratings per user

        Returns:
            Filtered DataFrame
        """
        counts = df.groupby("user")["item"].transform("size")
        filtered = df[counts >= min_ratings]
        logger.info(f"Kept users with >= {min_ratings} ratings: "
                    f"{df['user'].nunique()} -> {filtered['user'].nunique()} users")
        return filtered

    @staticmethod
    def build_index(df: pd.DataFrame) -> IdIndex:
        """Original ids in dense-index order (sorted ascending)."""
        return {
            "users": sorted(df["user"].unique().tolist()),
            "items": sorted(df["item"].unique().tolist()),
        }

    @staticmethod
    def reindex(df: pd.DataFrame, index: Optional[IdIndex] = None) -> Tuple[RatingMatrix, IdIndex]:
        """
        Map original ids onto dense 0-based indices

        Args:
            df: Frame with ``user``, ``item`` and ``rating`` columns
            index: Existing id index to reuse; rows with ids outside it are dropped

        Returns:
            Tuple of (RatingMatrix, id index)
        """
        index = index if index is not None else RatingsProcessor.build_index(df)
        user_pos = pd.Series(np.arange(len(index["users"])), index=pd.Index(index["users"]))
        item_pos = pd.Series(np.arange(len(index["items"])), index=pd.Index(index["items"]))
        users = df["user"].map(user_pos)
        items = df["item"].map(item_pos)
        known = users.notna() & items.notna()
        if not known.all():
            logger.warning(f"Dropped {int((~known).sum())} ratings with ids outside the index")
        ratings = RatingMatrix(
            len(index["users"]), len(index["items"]),
            users[known].to_numpy(dtype=np.int64),
            items[known].to_numpy(dtype=np.int64),
            df["rating"][known].to_numpy(dtype=np.int64),
        )
        return ratings, index

    @staticmethod
    def to_original_ids(df: pd.DataFrame, index: IdIndex) -> pd.DataFrame:
        """Replace dense ``user`` and ``item`` columns with the original ids."""
        out = df.copy()
        out["user"] = np.asarray(index["users"], dtype=object)[out["user"].to_numpy()]
        out["item"] = np.asarray(index["items"], dtype=object)[out["item"].to_numpy()]
        return out

    @staticmethod
    def join_with_truth(predictions: pd.DataFrame, truth: pd.DataFrame) -> pd.DataFrame:
        """
        Inner join of predictions and observed ratings on ``(user, item)``

        Args:
            predictions: Frame with ``user``, ``item`` and a ``predicted`` or ``rating`` column
            truth: Frame with ``user``, ``item`` and ``rating`` columns

        Returns:
            Joined DataFrame with ``predicted`` and ``rating`` columns
        """
        try:
            if "predicted" not in predictions.columns:
                predictions = predictions.rename(columns={"rating": "predicted"})
            logger.info(f"Joining {len(predictions)} predictions with {len(truth)} ratings")
            result = pd.merge(predictions, truth[RATING_COLUMNS], on=["user", "item"], how="inner")
            if len(result) < len(truth):
                logger.warning(f"{len(truth) - len(result)} ratings have no prediction")
            return result
        except Exception as e:
            logger.error(f"Join error: {str(e)}")
            raise
