import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping

import numpy as np
import pandas as pd

from censlvm.exceptions import DataException

logger = logging.getLogger(__name__)

STATUS_SUFFIX = "_status"
OBSERVED_FLAG = "obs"
LEFT_FLAG = "left"
RIGHT_FLAG = "right"
STATUS_FLAGS = (OBSERVED_FLAG, LEFT_FLAG, RIGHT_FLAG)

RESULT_SCHEMA = 1


def status_column(name: str) -> str:
    """
    Name of the column carrying the censoring flag of ``name``.
    """
    return f"{name}{STATUS_SUFFIX}"


def read_dataset(path) -> pd.DataFrame:
    """
    Reads a CSV dataset: header row, one column per variable, empty cells for
    missing values and optional ``<name>_status`` columns with values in
    {obs, left, right}.

    Args:
        path:       Path to the CSV file.

    Returns:
        A pandas DataFrame. Status columns are read as strings.

    Raises:
        DataException if the file cannot be parsed or has no rows.
    """
    path = Path(path)
    try:
        header = pd.read_csv(path, nrows=0).columns
        dtypes = {c: str for c in header if c.endswith(STATUS_SUFFIX)}
        data = pd.read_csv(path, dtype=dtypes, keep_default_na=True)
    except FileNotFoundError:
        raise
    except Exception as e:
        error_msg = f"cannot read dataset {path}"
        logger.error(f"CensLVM : {error_msg} : {e}")
        raise DataException(error_msg) from e
    if len(data) == 0:
        raise DataException(f"dataset {path} has no rows")
    for column in dtypes:
        flags = data[column].dropna().str.strip()
        bad = sorted(set(flags) - set(STATUS_FLAGS) - {""})
        if bad:
            raise DataException(f"column {column} has unknown censoring flags: {', '.join(bad)}")
    return data


def write_dataset(data: pd.DataFrame, path):
    """
    Writes a dataset in the dialect read_dataset understands. Floats are
    written with round-trip precision so rewritten files are byte-identical.
    """
    data.to_csv(Path(path), index=False, float_format="%.17g", na_rep="")


def _clean(value):
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_clean(v) for v in value.tolist()]
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    return value


def write_result(result: Mapping, path):
    """
    Writes a result record as JSON with sorted keys. NaN and infinities are
    written as null.
    """
    record = dict(_clean(dict(result)))
    record["schema"] = RESULT_SCHEMA
    Path(path).write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")


def read_result(path) -> Dict:
    try:
        record = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        error_msg = f"cannot parse result file {path}"
        logger.error(f"CensLVM : {error_msg} : {e}")
        raise DataException(error_msg) from e
    if record.get("schema") != RESULT_SCHEMA:
        raise DataException(f"result file {path} has unsupported schema {record.get('schema')}")
    return record


def read_parameter_values(path) -> Dict[str, float]:
    """
    Reads a JSON object mapping parameter names to values on the natural
    (variance, not log-variance) scale.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        error_msg = f"cannot parse parameter file {path}"
        logger.error(f"CensLVM : {error_msg} : {e}")
        raise DataException(error_msg) from e
    if not isinstance(raw, dict):
        raise DataException(f"parameter file {path} must hold a JSON object of name: value pairs")
    values = {}
    for name, value in raw.items():
        try:
            values[str(name)] = float(value)
        except (TypeError, ValueError) as e:
            error_msg = f"parameter '{name}' in {path} is not a number"
            logger.error(f"CensLVM : {error_msg} : {e}")
            raise DataException(error_msg) from e
    return values


def read_blocks(path) -> List[List[str]]:
    """
    Reads a custom block file: one block per line, variable names separated
    by commas or whitespace. Blank lines and ``#`` comments are ignored.
    """
    blocks = []
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].replace(",", " ").split()
        if line:
            blocks.append(line)
    if not blocks:
        raise DataException(f"block file {path} defines no blocks")
    return blocks
