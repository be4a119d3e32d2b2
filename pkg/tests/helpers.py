import numpy as np

from slackmerge import Checkpoint, TaskVector, trim


def ckpt(dtype=None, **arrays):
    return Checkpoint.from_arrays(
        {k: np.asarray(v, dtype=np.float32) for k, v in arrays.items()}, dtype=dtype
    )


def trimmed(values, k=1.0, granularity="per_tensor", name="w"):
    if not isinstance(values, dict):
        values = {name: values}
    return trim(TaskVector.from_arrays(values), k, granularity)
