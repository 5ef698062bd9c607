"""dynagrid: RGB-D surface reconstruction on a dynamically subdividing voxel grid.

Signed distance and grayscale radiance values live on the nodes of a sparse
hierarchical grid and are fit to posed RGB-D frames by direct gradient
descent through a differentiable SDF renderer; voxels with surface evidence
and high loss are selectively subdivided during optimization, and a triangle
mesh is extracted by marching cubes and scored against ground truth.
"""

__version__ = "0.1.0"

from .grid import (ConfigurationError, DynamicGrid, GridConfig, OutOfDomainError,
                   SubdivisionReport, VoxelRef, decode_key, encode_key, init_grid,
                   load_grid, save_grid, stats, subdivide, trace)
from .field import InterpResult, interpolate, interpolate_backward, query, sample_field
from .render import Camera, Rays, RenderForward, alpha, composite, generate_rays, \
    intersect_bbox, render_backward, sample_importance, sample_uniform
from .train import (TrainConfig, Trainer, TrainingDiverged, VoxelLossAccumulator,
                    accumulate_voxel_losses, classify_samples, evaluate_batch, loss_fs,
                    loss_rgb, loss_sdf, scale_scene, sdf_targets,
                    select_subdivision_candidates, total_loss, train)
from .scene_io import (AnalyticScene, BoxPrim, DatasetError, Frame, SpherePrim,
                       analytic_sdf, estimate_bbox, load_dataset, load_scene_file,
                       look_at_pose, make_orbit_poses, render_synthetic, save_dataset)
from .mesh import (MeshMetrics, SdfVolume, TriangleMesh, export_mesh, load_mesh,
                   marching_cubes, metrics, sample_surface, sample_volume,
                   surface_area, vertex_normals, voxelize_solid)
