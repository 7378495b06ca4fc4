"""Deterministic tabletop world standing in for the robot, cameras and segmenter."""

from .render import SimObservation, render, render_underside
from .scene import SceneError, SceneFileError, SceneObject, TabletopScene, jitter_scene
from .world import (
    AmbiguousName,
    IllegalState,
    NoContact,
    NoObjectAtGrasp,
    NotVisible,
    ObjectBlocked,
    ObjectBuried,
    TabletopWorld,
    UnknownObject,
    WorldError,
    apply_camera_move,
    apply_grasp_place,
    apply_lift_to_camera,
    apply_push,
    find_object,
    place_held,
    segmentation_oracle,
    visible_fraction,
)
