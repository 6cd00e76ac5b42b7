from multiprocessing import Pool
from typing import Callable, List

import pandas as pd
from threadpoolctl import threadpool_limits
from tqdm import tqdm


def apply_func_with_multiprocessing(
    func: Callable, points: pd.DataFrame, num_processes: int = 1, progress: bool = False
) -> List:
    """
    Call func(points.iloc[idx].to_dict()) for every row, optionally in parallel.

    Parameters
    ----------
    func: callable
        Must be picklable if num_processes > 1.
    points : pd.DataFrame
        One row per call, one column per argument.
    num_processes : int
        Number of parallel processes to use.
    progress : bool
        Show a tqdm progress bar.

    Returns
    -------
    result: list
        result[idx] = func(points.iloc[idx].to_dict()), in row order.
    """
    with threadpool_limits(limits=1, user_api="blas"):
        point_generator = (row.to_dict() for _, row in points.iterrows())

        if num_processes > 1:
            with Pool(processes=num_processes) as pool:
                result = list(
                    tqdm(
                        pool.imap(func, point_generator),
                        total=len(points),
                        disable=not progress,
                    )
                )
        else:
            result = [
                func(p)
                for p in tqdm(point_generator, total=len(points), disable=not progress)
            ]

    return result
