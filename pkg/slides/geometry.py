from dataclasses import dataclass


class GeometryError(ValueError):
    """Raised when a resolution spec, slide size or pyramid is inconsistent."""


@dataclass(frozen=True)
class ResolutionSpec:
    """Linear magnification per branch, highest first (X1, X2, X3)."""

    factors: tuple[int, int, int] = (16, 4, 1)
    patch_size: int = 256

    def __post_init__(self):
        errors = validate_resolution(self.factors, self.patch_size)
        if errors:
            raise GeometryError("; ".join(errors))
        object.__setattr__(self, "factors", tuple(int(f) for f in self.factors))

    @property
    def top(self):
        return self.factors[0]

    @property
    def bottom(self):
        return self.factors[-1]

    @property
    def span(self):
        """Ratio between the highest and the lowest magnification."""
        return self.factors[0] // self.factors[-1]

    def level_side(self, base_side, factor):
        return base_side * factor // self.top

    def footprint(self, factor):
        """Side of a patch at ``factor`` measured in base-level pixels."""
        return self.patch_size * self.top // factor

    def footprint_ratio(self, factor, reference):
        """How many times wider the footprint at ``reference`` is than at ``factor``."""
        return factor / reference


def validate_resolution(factors, patch_size):
    errors = []
    try:
        factors = [int(f) for f in factors]
    except (TypeError, ValueError):
        return ["resolution.factors must be integers"]
    if len(factors) != 3:
        errors.append("resolution.factors must contain exactly three values")
        return errors
    if any(f <= 0 for f in factors):
        errors.append("resolution.factors must be positive")
        return errors
    m1, m2, m3 = factors
    if not (m1 > m2 > m3):
        errors.append("resolution.factors must be strictly decreasing")
    elif m1 % m2 or m2 % m3:
        errors.append("resolution.factors must divide each other (m1 % m2 == 0, m2 % m3 == 0)")
    if not isinstance(patch_size, int) or isinstance(patch_size, bool):
        errors.append("resolution.patch_size must be an integer")
    elif patch_size < 16 or patch_size % 2:
        errors.append("resolution.patch_size must be even and >= 16")
    return errors


def check_base_side(base_side, spec):
    if base_side <= 0 or base_side % spec.span:
        raise GeometryError(
            f"base_side {base_side} must be a positive multiple of {spec.span} "
            f"(m1/m3 for factors {spec.factors})"
        )
