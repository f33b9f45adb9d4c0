"""Static-teacher latent training (SALT) at desk scale on synthetic video."""

import os

# Thread caps must be in the environment before numpy initialises BLAS.
if os.environ.get("SALT_NUM_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "BLIS_NUM_THREADS",
                 "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[_var] = os.environ["SALT_NUM_THREADS"]

__version__ = "0.1.0"
