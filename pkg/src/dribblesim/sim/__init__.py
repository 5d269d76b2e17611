from .kinematics import LEG_NAMES, all_feet_body, chain_points_body, leg_forward_kinematics
from .world import EmptyFallBank, NonFiniteState, VecWorld, ball_ground_forces, terrain_height
from .fallbank import generate_fall_bank, load_fall_bank, save_fall_bank

__all__ = [
    "LEG_NAMES",
    "all_feet_body",
    "chain_points_body",
    "leg_forward_kinematics",
    "EmptyFallBank",
    "NonFiniteState",
    "VecWorld",
    "ball_ground_forces",
    "terrain_height",
    "generate_fall_bank",
    "load_fall_bank",
    "save_fall_bank",
]
