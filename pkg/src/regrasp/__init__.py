"""Functional regrasp planning for a dual-arm robot.

A category shape space turns a partial view of a novel instance into a
deformed mesh and a warped functional grasp. A supportive hand picks the
object with an antipodal top-down grasp, both hands meet in the cheapest
feasible handover, and the held object is shown to the sensor so the
functional grasp can be corrected for slip before the regrasp.

Modules: ``geometry`` (poses, meshes, exact closest points), ``icp``,
``shape_space``, ``render``, ``grasping``, ``kinematics``, ``collision``,
``handover``, ``view_pose``, ``pipeline`` and ``cli``.
"""

__version__ = "0.1.0"
