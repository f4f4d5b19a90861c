import numpy as np
import pytest

from downscale import AggregationUnit, CoarseTable, FeatureSchema


def make_schemas(spec):
    """Build schemas from shorthand tuples.

    ("name", n_classes, batch) for categorical, ("name", None, batch) for
    continuous; batch 0 features are core.
    """
    out = []
    for name, n_classes, batch in spec:
        if n_classes is None:
            out.append(FeatureSchema(name, "continuous", (), batch, batch == 0))
        else:
            classes = tuple(f"{name}_c{i}" for i in range(n_classes))
            out.append(FeatureSchema(name, "categorical", classes, batch, batch == 0))
    return out


def make_coarse(schemas, populations, rng=None):
    """Random valid coarse table over the given schemas."""
    rng = rng or np.random.default_rng(0)
    units = []
    for i, pop in enumerate(populations):
        values = {}
        for sc in schemas:
            if sc.is_categorical:
                values[sc.name] = rng.dirichlet(np.full(sc.n_classes, 3.0))
            else:
                values[sc.name] = float(rng.uniform(0.5, 10.0))
        units.append(AggregationUnit(f"u{i:04d}", int(pop), values))
    return CoarseTable(units)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
