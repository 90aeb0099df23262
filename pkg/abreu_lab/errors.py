"""Error hierarchy.

Every error carries the module it was raised in, an optional context
(node indices or a point) and the process exit code the CLI maps it to.
Refusals exit with 2, numerical failures with 1.
"""

from typing import Any, Optional


class AbreuLabError(Exception):
    exit_code: int = 1
    module: str = "abreu_lab"

    def __init__(self, detail: str, context: Optional[Any] = None, module: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        self.context = context
        if module is not None:
            self.module = module

    def __str__(self) -> str:
        msg = f"[{self.module}] {self.detail}"
        if self.context is not None:
            msg += f" (context: {_short(self.context)})"
        return msg


def _short(context: Any, limit: int = 8) -> str:
    if isinstance(context, (list, tuple)) and len(context) > limit:
        head = ", ".join(str(c) for c in context[:limit])
        return f"[{head}, ... {len(context) - limit} more]"
    return str(context)


# ── Refusals (exit 2) ────────────────────────────────────────────────────

class RefusalError(AbreuLabError):
    exit_code = 2


class ConfigInvalid(RefusalError):
    module = "cli"


class RefusedAffineDefect(RefusalError):
    module = "functionals"


# ── Numerical failures (exit 1) ──────────────────────────────────────────

class PointOutside(AbreuLabError):
    module = "polytope"


class InvalidPolytope(AbreuLabError):
    module = "polytope"


class TooCoarse(AbreuLabError):
    module = "discretize"


class DegenerateHessian(AbreuLabError):
    module = "discretize"


class NotConvex(AbreuLabError):
    module = "potentials"


class OutOfRange(AbreuLabError):
    module = "potentials"


class ScheduleDegenerate(AbreuLabError):
    module = "potentials"


class NonPositiveDensity(AbreuLabError):
    module = "operator"


class DualUnavailable(AbreuLabError):
    module = "operator"


class DualBoxTooSmall(AbreuLabError):
    module = "legendre"


class LineSearchStalled(AbreuLabError):
    module = "solver"
