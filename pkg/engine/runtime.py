import os
import sys

import numpy as np
import torch


def get_runtime_info():
    return {
        "app_version": os.environ.get("MSN_VERSION", "0.3.1"),
        "python_version": sys.version.split()[0],
        "numpy_version": np.__version__,
        "torch_version": torch.__version__,
    }
