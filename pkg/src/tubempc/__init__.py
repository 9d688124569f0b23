"""Homothetic tube MPC toolkit: contraction-metric tubes, set-membership
parameter adaptation, receding-horizon solves and closed-loop simulation."""

__version__ = "0.1.0"

from .ccm import CCM, SampleSpec, TubeConstants, compute_cj, compute_constants, \
    compute_LD, compute_LG, eval_feedback_gain, eval_metric, eval_metric_sqrt, \
    verify_ccm
from .errors import (CCMDomainError, EstimationInconsistent, GeodesicError,
                     IntegrationError, OCPInfeasible, ReferencePointError,
                     RigidTubeInfeasible, TubeMPCError, UnboundedPolytope,
                     UnsupportedDimension)
from .estimation import (Measurement, fixed_complexity_update, nonfalsified_set,
                         update_parameter_set)
from .geodesics import (GeodesicCurve, GeodesicOptions, feedback_kappa,
                        riemann_energy, solve_geodesic, v_delta)
from .model import (ConstraintFn, QuadrotorParams, UncertainSystem,
                    eval_dynamics, eval_jacobians, eval_nominal, load_system,
                    quadrotor_model)
from .ocp import (MPCConfig, MPCSolution, ReferenceMap, build_ocp,
                  quadrotor_reference, reference_point, shift_candidate,
                  solve_ocp, terminal_check)
from .polytopes import Polytope
from .simulate import (SimConfig, SimLog, audit_containment, measure_derivative,
                       run_closed_loop)
from .tube import (TubeState, f_delta, integrate_tube, rigid_tube_scaling,
                   tightened_constraints, w_bar_requirement)
