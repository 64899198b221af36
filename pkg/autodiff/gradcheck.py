from typing import Iterable, Mapping

import numpy as np

from autodiff.graph import ComputeGraph, NodeRef, derive, evaluate, gradient_name
from errors import InputError


class GradCheckReport:
    max_relative_error: float
    worst_coordinate: tuple[str, int]
    step_size: float

    def __init__(self, max_relative_error: float, worst_coordinate: tuple[str, int], step_size: float):
        self.max_relative_error = max_relative_error
        self.worst_coordinate = worst_coordinate
        self.step_size = step_size

    def __repr__(self):
        return f"GradCheckReport(max_relative_error={self.max_relative_error:.3e}, worst_coordinate={self.worst_coordinate}, step_size={self.step_size})"


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def finite_difference_check(
        graph: ComputeGraph,
        scalar_output: NodeRef,
        wrt: Iterable[str],
        step: float,
        bindings: Mapping[str, np.ndarray],
) -> GradCheckReport:
    if step <= 0:
        raise InputError(f"finite-difference step must be positive, got {step}")
    scalar = graph.resolve(scalar_output)
    scalar_label = graph.label(scalar)
    extended_builder = graph.thaw()
    extended_builder.output(scalar_label, scalar)
    wrt = list(wrt)
    for name in wrt:
        if name not in graph.inputs:
            raise InputError(f"finite differences need a bound input, '{name}' is not one")
    extended = derive(extended_builder.freeze(), scalar_label, wrt)
    bindings = {name: np.array(value, dtype=np.float64) for name, value in bindings.items()}
    analytic = evaluate(extended, bindings, [gradient_name(scalar_label, name) for name in wrt])

    def value_at(perturbed):
        return float(evaluate(extended, perturbed, [scalar_label])[scalar_label])

    worst = 0.0
    worst_coordinate = (wrt[0], 0) if wrt else ('', 0)
    for name in wrt:
        gradient = analytic[gradient_name(scalar_label, name)].reshape(-1)
        base = bindings[name]
        for index in range(base.size):
            shifted = dict(bindings)
            plus = base.copy()
            plus.reshape(-1)[index] += step
            shifted[name] = plus
            upper = value_at(shifted)
            minus = base.copy()
            minus.reshape(-1)[index] -= step
            shifted[name] = minus
            lower = value_at(shifted)
            error = relative_error(float(gradient[index]), (upper - lower) / (2.0 * step))
            if error > worst:
                worst = error
                worst_coordinate = (name, index)
    return GradCheckReport(worst, worst_coordinate, step)
