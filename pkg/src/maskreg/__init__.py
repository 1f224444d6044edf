"""Masked linear regression with local receptive fields for image-to-image mapping."""

from .dataset import (DesignSet, ImageBuffer, SplitSpec, Strategy, build_design_set, load_image,
                      load_manifest, save_image, split)
from .errors import DataError, GeometryError, ModelFormatError, NumericError
from .evaluation import CvGrid, cross_validate, default_grid, evaluate, mse_x100, sparsity_ratio, train
from .model import (SparseRowModel, count_nonzeros, load, relative_importance, save, synthesize,
                    weight_only_synthesize)
from .refinement import AlphaMap, AlphaParams, compute_alpha, refine
from .solvers import (Hyperparams, fit_model, gradient_masked, hessian_block, solve_lasso_row,
                      solve_masked, solve_omp_row, solve_ridge)
from .topology import RfGeometry, Topology, build_topology, total_parameters

__version__ = "0.1.0"
