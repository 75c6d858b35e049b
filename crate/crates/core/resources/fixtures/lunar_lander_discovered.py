def choose_action(s: list, last_action: int, s_pre: list) -> int:
    """
    Selects an action for the Lunar Lander to achieve a safe landing at the target location (0, 0).
    Args:
        s (list or np.ndarray): The current state of the lander. Elements:
            s[0] - horizontal position (x)
            s[1] - vertical position (y)
            s[2] - horizontal velocity (v_x)
            s[3] - vertical velocity (v_y)
            s[4] - angle (radians)
            s[5] - angular velocity
            s[6] - 1 if the first leg is in contact with the ground, else 0
            s[7] - 1 if the second leg is in contact with the ground, else 0
        last_action (int): The action taken in the previous step. One of:
            0 - do nothing
            1 - fire left orientation engine
            2 - fire main (upward) engine
            3 - fire right orientation engine
        s_pre (list or np.ndarray): The state of the lander *before* the last action was executed. 
    Returns:
        int: The chosen action for the next step. One of:
            0 - do nothing
            1 - fire left orientation engine
            2 - fire main (upward) engine
            3 - fire right orientation engine
    """
    angle_targ = (s[0] * 0.5 + s[2] * 0.5)  # Designed for better orientation control
    angle_targ = np.clip(angle_targ, -0.6, 0.6)  # Slightly wider bounds for orientation

    # Update hover target with amplified sensitivity to vertical speed
    hover_targ = 0.3 * np.abs(s[0]) + 0.7 * (s[3] ** 2)  # Greater weight for hover stabilizing

    # Calculate actions for adjustments
    angle_todo = (angle_targ - s[4]) * 1.6 - (s[5]) * 1.2  # More aggressive response for angle adjustments
    hover_todo = (hover_targ - s[1]) * 1.3 - (s[3]) * 0.4  # Enhanced weight for vertical control

    # Stabilizing when legs are in contact
    if s[6] or s[7]:
        angle_todo = 0  # Maintain upright position priority
        hover_todo -= (s[3]) * 0.4  # Stronger adjustment for vertical speed reduction

    # Decision-making based on refined thresholds and more responsive measures
    a = 0
    if hover_todo > np.abs(angle_todo) and hover_todo > 0.10:  # Slightly tighter hover threshold
        a = 2  # Fire main engine
    elif angle_todo < -0.15:  # Increased sensitivity for left engine
        a = 3
    elif angle_todo > 0.15:  # Increased sensitivity for right engine
        a = 1
    return a
