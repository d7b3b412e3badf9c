"""densefit: refine articulated body-mesh estimates against dense 2D
displacement fields."""

__version__ = "0.1.0"

from .bodymodel import (BodyModel, ModelError, SynthConfig, forward, load_model,
                        make_synthetic_model, normalize_pose, posed_joints,
                        regress_keypoints, rodrigues, save_model)
from .camera import Camera, CameraError, default_focal, frame_camera, project
from .displacement import (DisplacementField, FieldError, VertexDisplacements, epe,
                           gt_vertex_displacements, masked_l1, pixel_to_vertex,
                           read_field, target_vertices, vertex_to_pixel, write_field)
from .fitter import (DenseTarget, FitConfig, FitDivergence, FitError, FitResult,
                     SparseTarget, Stage, fit, geman_mcclure, make_dense_target,
                     make_sparse_target, objective, objective_gradient, reproj_dense,
                     reproj_sparse)
from .harness import (ExperimentConfig, ExperimentResult, ablate_noise, ablate_texture,
                      render_overlay, run_experiment, summarize_rows)
from .metrics import (MetricsError, MetricsReport, mpjpe, n_mpjpe, n_pve, pa_align,
                      pa_mpjpe, pa_pve, pve, report)
from .priors import (GmmPrior, PriorError, bending, fit_gmm, gmm_nll, load_prior,
                     save_prior, shape_reg)
from .providers import ProviderSpec, ProviderError, provide_dense, provide_sparse
from .rasterizer import (RenderBuffers, RasterError, rasterize, unique_vertex_colors,
                         vertex_visibility, write_ppm_color, write_ppm_gray16)
from .scenes import Scene, SceneError, make_scene, perturb_params
from .texture import (TextureError, VertexTexture, backproject, median_texture,
                      perturb_texture)
