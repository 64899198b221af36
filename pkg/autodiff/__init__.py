from autodiff.graph import (
    ComputeGraph,
    GraphBuilder,
    append_gradients,
    derive,
    evaluate,
    gradient_name,
)
from autodiff.gradcheck import GradCheckReport, finite_difference_check
