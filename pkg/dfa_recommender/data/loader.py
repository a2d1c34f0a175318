"""
Rating loaders.
Reads ``user,item,rating`` tables from CSV files or SQL databases and turns
them into densely indexed rating matrices.
"""
import logging
import os
import re
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd
import sqlalchemy as db
from sqlalchemy.engine import URL, Engine

from ..exceptions import DomainError, RatingsParseError, RatingsValidationError
from ..model.core import N_LEVELS, RatingMatrix
from .processor import RATING_COLUMNS, IdIndex, RatingsProcessor

logger = logging.getLogger(__name__)

SUPPORTED_FORMATS = ("csv", "sql")
# type -> (driver, default port)
DRIVERS = {
    "sqlite": ("sqlite", None),
    "postgres": ("postgresql", 5432),
    "postgresql": ("postgresql", 5432),
    "mysql": ("mysql+pymysql", 3306),
}


class RatingsLoader:
    """
    Loads rating tables into pandas DataFrames and validates them.
    """

    @staticmethod
    def load_from_csv(file_path: str) -> Tuple[pd.DataFrame, Dict[str, Any]]:
        """
        Load ratings from a CSV file with integer ``user,item,rating`` fields

        A leading ``user,item,rating`` header line is optional.

        Args:
            file_path: Path to CSV file

        Returns:
            Tuple of (DataFrame with integer columns, metadata)

        Raises:
            RatingsParseError: on a line that is not three integers
        """
        try:
            logger.info(f"Loading ratings from CSV: {file_path}")
            if not os.path.exists(file_path):
                raise FileNotFoundError(f"CSV file not found: {file_path}")

            try:
                raw = pd.read_csv(file_path, header=None, dtype=str, skip_blank_lines=False,
                                  skipinitialspace=True)
            except pd.errors.EmptyDataError:
                raise RatingsParseError("file holds no ratings", 1)
            except pd.errors.ParserError as e:
                found = re.search(r"line (\d+)", str(e))
                raise RatingsParseError("expected 3 fields", int(found.group(1)) if found else None)
            if raw.shape[1] != len(RATING_COLUMNS):
                raise RatingsParseError(f"expected 3 fields, got {raw.shape[1]}", 1)
            raw.columns = RATING_COLUMNS

            line_no = pd.Series(np.arange(1, len(raw) + 1), index=raw.index)
            if len(raw) and [str(v).strip().lower() for v in raw.iloc[0]] == RATING_COLUMNS:
                raw, line_no = raw.iloc[1:], line_no.iloc[1:]
            blank = raw.isna().all(axis=1)
            raw, line_no = raw[~blank], line_no[~blank]

            df = RatingsLoader._parse_integers(raw, line_no)
            metadata = {
                "source_type": "file",
                "file_type": "csv",
                "file_path": file_path,
                "file_size_bytes": os.stat(file_path).st_size,
                "row_count": len(df),
            }
            RatingsLoader.validate(df, line_no.to_numpy())
            logger.info(f"Loaded {len(df)} ratings from CSV")
            return df, metadata

        except Exception as e:
            logger.error(f"CSV loading error: {str(e)}")
            raise

    @staticmethod
    def load_from_database(connection: Union[str, Dict[str, Any]], query: str) -> Tuple[pd.DataFrame, Dict[str, Any]]:
        """
        Load ratings with a SQL query returning ``user``, ``item`` and ``rating`` columns

        Args:
            connection: SQLAlchemy URL, or connection parameters with ``type``
                (sqlite, postgres, mysql), ``database`` and for servers
                ``host``, ``port``, ``username``, ``password``
            query: SQL query to execute

        Returns:
            Tuple of (DataFrame with query results, metadata)
        """
        try:
            engine = RatingsLoader._create_db_engine(connection)
            logger.info(f"Executing ratings query on {engine.dialect.name} database")
            df = pd.read_sql(query, engine)

            missing = [c for c in RATING_COLUMNS if c not in df.columns]
            if missing:
                raise RatingsParseError(f"query result lacks columns {missing}")
            df = df[RATING_COLUMNS]
            if df.isna().any().any() or not all(pd.api.types.is_integer_dtype(df[c]) for c in RATING_COLUMNS):
                raise RatingsParseError("query result must hold integer user, item and rating values")

            metadata = {
                "source_type": "database",
                "database_type": engine.dialect.name,
                "row_count": len(df),
                "query": query,
            }
            RatingsLoader.validate(df, None)
            logger.info(f"Query returned {len(df)} ratings")
            return df.astype(np.int64), metadata

        except Exception as e:
            logger.error(f"Database query error: {str(e)}")
            raise

    @staticmethod
    def validate(df: pd.DataFrame, line_no: Optional[np.ndarray]) -> None:
        """Ratings in 1..5 and no repeated (user, item) pair; the first offender is reported."""
        where = (lambda j: f"line {line_no[j]}") if line_no is not None else (lambda j: f"row {j + 1}")
        bad = np.flatnonzero(((df["rating"] < 1) | (df["rating"] > N_LEVELS)).to_numpy())
        if bad.size:
            j = int(bad[0])
            raise RatingsValidationError(f"{where(j)}: rating {df['rating'].iloc[j]} is outside 1-{N_LEVELS}")
        dup = np.flatnonzero(df.duplicated(["user", "item"]).to_numpy())
        if dup.size:
            j = int(dup[0])
            raise RatingsValidationError(
                f"{where(j)}: duplicate rating for user {df['user'].iloc[j]}, item {df['item'].iloc[j]}"
            )

    @staticmethod
    def _parse_integers(raw: pd.DataFrame, line_no: pd.Series) -> pd.DataFrame:
        parsed = {}
        bad = pd.Series(False, index=raw.index)
        for col in RATING_COLUMNS:
            text = raw[col].astype("string").str.strip()
            ok = text.str.fullmatch(r"[+-]?\d+").fillna(False).astype(bool)
            bad |= ~ok
            parsed[col] = pd.to_numeric(text.where(ok), errors="coerce")
        if bad.any():
            first = bad.to_numpy().argmax()
            values = ",".join("" if pd.isna(v) else str(v) for v in raw.iloc[first])
            raise RatingsParseError(f"expected three integers, got {values!r}", int(line_no.iloc[first]))
        return pd.DataFrame({col: parsed[col].astype(np.int64) for col in RATING_COLUMNS}).reset_index(drop=True)

    @staticmethod
    def connection_url(connection: Dict[str, Any]) -> URL:
        """
        SQLAlchemy URL for connection parameters; servers use their default port when none is given.

        Raises:
            DomainError: for a database type other than sqlite, postgres or mysql
        """
        db_type = str(connection.get('type', '')).lower()
        if db_type not in DRIVERS:
            raise DomainError(f"Unsupported database type: {db_type}")
        driver, default_port = DRIVERS[db_type]
        if driver == 'sqlite':
            return URL.create(driver, database=connection.get('database'))
        return URL.create(driver, username=connection.get('username'), password=connection.get('password'),
                          host=connection.get('host'), port=int(connection.get('port', default_port)),
                          database=connection.get('database'))

    @staticmethod
    def _create_db_engine(connection: Union[str, Dict[str, Any]]) -> Engine:
        if isinstance(connection, str):
            return db.create_engine(connection)
        return db.create_engine(RatingsLoader.connection_url(connection))


def ingest_ratings(path: str, format: str = "csv", query: Optional[str] = None,
                   index: Optional[IdIndex] = None, top_items: Optional[int] = None,
                   min_user_ratings: Optional[int] = None) -> Tuple[RatingMatrix, Dict[str, Any]]:
    """
    Load, filter and densely re-index a rating table.

    Args:
        path: CSV path, or database URL when ``format="sql"``
        format: ``csv`` or ``sql``
        query: SQL query for ``format="sql"``; defaults to the ``ratings`` table
        index: Id index to reuse so that files share the training indices
        top_items: Keep only the most rated items
        min_user_ratings: Keep only users with at least this many ratings

    Returns:
        Tuple of (RatingMatrix, metadata including the id index under ``"index"``)
    """
    if format == "csv":
        df, metadata = RatingsLoader.load_from_csv(path)
    elif format == "sql":
        df, metadata = RatingsLoader.load_from_database(path, query or 'SELECT "user", item, rating FROM ratings')
    else:
        raise DomainError(f"unknown ratings format {format!r}; expected one of {SUPPORTED_FORMATS}")

    if top_items is not None:
        df = RatingsProcessor.filter_top_items(df, top_items)
    if min_user_ratings is not None:
        df = RatingsProcessor.filter_min_user_ratings(df, min_user_ratings)

    ratings, index = RatingsProcessor.reindex(df, index)
    metadata.update({"index": index, "m": ratings.m, "n": ratings.n, "n_obs": ratings.n_obs})
    logger.info(f"Ingested {ratings.n_obs} ratings from {ratings.m} users and {ratings.n} items")
    return ratings, metadata
