"""Slot-based freeway simulator with ramp-metering policies."""

from .analysis import (
    batch_means,
    capacity_drop,
    classify_stability,
    empirical_drift,
    inner_region_fixed_cycle,
    inner_region_renewal,
    outer_region,
    queue_time_average,
    saturation_probe,
    ttt_n,
)
from .chain import SlotChain, run_chain
from .core import (
    DemandSpec,
    Geometry,
    Params,
    cumulative_routing,
    link_loads,
    ring_geometry,
    sample_arrivals,
    slot_capacity,
    straight_geometry,
    time_step_tau,
)
from .dynamics import (
    VehicleState,
    assign_virtual_leader,
    merge_headway_multiple,
    predict_crossing_time,
    safety_distance,
    safety_mode_accel,
    speed_tracking_profile,
    update_mode,
)
from .lattice import SlotSystem, build_slot_system
from .policies import PolicyConfig, make_policy
from .simulator import Simulator, run_sim

__version__ = "0.1.0"

__all__ = [
    "DemandSpec", "Geometry", "Params", "PolicyConfig", "SlotChain", "SlotSystem", "Simulator",
    "VehicleState", "assign_virtual_leader", "batch_means", "build_slot_system", "capacity_drop",
    "classify_stability", "cumulative_routing", "empirical_drift", "inner_region_fixed_cycle",
    "inner_region_renewal", "link_loads", "make_policy", "merge_headway_multiple", "outer_region",
    "predict_crossing_time", "queue_time_average", "ring_geometry", "run_chain", "run_sim",
    "safety_distance", "safety_mode_accel", "sample_arrivals", "saturation_probe", "slot_capacity",
    "speed_tracking_profile", "straight_geometry", "time_step_tau", "ttt_n", "update_mode",
]
