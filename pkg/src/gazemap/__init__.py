"""Library for predicting where human gaze lands on an image.

Feature extraction (multi-level conv backbone + centre-surround contrast
features), channel-attention fusion across scales, a learnable centre
prior, KL-divergence training, the standard saliency evaluation metrics,
and a synthetic high-contrast dataset generator. Everything runs on the
CPU in double precision on top of a small reverse-mode tensor engine.
"""


def _tune_malloc() -> None:
    # Keep large blocks on the heap instead of mmap/munmap round trips:
    # re-faulting freshly mapped pages dominates training time on
    # sandboxed kernels. Best effort; silently skipped off glibc.
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-4, 0)            # M_MMAP_MAX = 0
        libc.mallopt(-1, 2 ** 30)      # M_TRIM_THRESHOLD: never trim
    except (OSError, AttributeError):
        pass


_tune_malloc()

from gazemap.autodiff import Tensor, ParamStore, backward, grad_check  # noqa: E402

__version__ = "0.1.0"

__all__ = ["Tensor", "ParamStore", "backward", "grad_check", "__version__"]
