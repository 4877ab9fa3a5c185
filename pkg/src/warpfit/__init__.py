"""Registration of sparsely sampled curves with a random-effects warping
model, and logistic discrimination on amplitude scores and warp knots."""

from .data import Dataset, SimSpec, default_template, downsample, load_curves, simulate, truncate
from .discriminate import FeatureRow, LogisticModel, cross_validate, fit_logistic, predict_prob
from .model import (
    Curve,
    FitConfig,
    SubjectEffects,
    TemplateModel,
    conditional_loglik,
    design_matrix,
    e_step,
    fit_em,
    m_step,
    marginal_loglik,
    posterior_theta_map,
    register_curve,
)
from .splines import (
    BSplineBasis,
    MonotoneWarp,
    bspline_eval,
    gram_matrix,
    jupp_forward,
    jupp_inverse,
    make_warp,
    warp_deriv,
    warp_eval,
    warp_invert,
)

__version__ = "0.1.0"
