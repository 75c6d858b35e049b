def choose_action(observation, car_speed, pre_action, pre_observation):
    """
    Determine the next action for the Car Racing agent.
    Args:
        observation (np.ndarray): The current state observed by the agent, represented as a 96x96 RGB image of the car and race track from a top-down view (shape: (96, 96, 3)).
        car_speed (float): The current speed of the car.
        pre_action (np.ndarray): Action taken by the agent in the previous step, represented as a 3-element array.
        pre_observation (np.ndarray): The observation received when the previous action was taken. It has the same shape and format as `observation` (i.e., a 96x96 RGB image).
    Returns:
        np.ndarray: The action selected by the agent for the next step, represented as an array of shape (3,) where:
                    - Index 0: Steering, where -1 is full left, +1 is full right (range: [-1, 1]).
                    - Index 1: Gas, (range: [0, 1]).
                    - Index 2: Braking, (range: [0, 1]).
    """
    hsv = cv2.cvtColor(observation, cv2.COLOR_RGB2HSV)
    # Define masks for track, off-track, and curbs detection
    track_mask = cv2.inRange(hsv, (0, 0, 60), (179, 255, 200))  # Track pixels
    off_track_mask = cv2.inRange(hsv, (40, 100, 100), (90, 255, 255))  # Off-track pixels
    curbs_mask = cv2.inRange(hsv, (180, 100, 100), (255, 255, 255))  # Curbs detection

    # Analyze the center region for better decision making
    height, width = track_mask.shape
    center_region = track_mask[int(height / 3):int(2 * height / 3), int(width / 4):int(3 * width / 4)]
    # Initialize the action array
    action = np.zeros(3)
    # Identify whether track is present and where
    track_detected = np.sum(center_region) > 0
    if not track_detected:
        action[2] = 1.0  # Full brake if no track detected
    else:
        # Identify track pixel positions
        track_pixels = np.column_stack(np.where(center_region > 0))
        mean_x = np.mean(track_pixels[:, 1]) if len(track_pixels) > 0 else center_region.shape[1] / 2

        # Steering adjustment with consideration for immediate curvature
        steering = (mean_x - (center_region.shape[1] / 2)) / (center_region.shape[1] / 2)
        action[0] = np.clip(steering, -1, 1)  # Normalize steering value

    # Adaptive throttle management based on speed
    if car_speed < 1.0:
        action[1] = 1.0  # Full throttle if the car is very slow
    else:
        # Adjust throttle considering steering
        if abs(action[0]) > 0.5:
            action[1] = max(0.0, 1.0 - abs(action[0]))  # Reduce throttle during significant turns
        else:
            action[1] = min(1.0, action[1] + 0.05)  # Gradual increase on straights

    # Enhanced braking logic considering sharp turns
    if abs(action[0]) > 0.6 and car_speed > 2.0:
        action[2] = min(0.4, action[2] + 0.1)  # Moderate braking for sudden turns
    else:
        action[2] = 0.0  # No brake needed on straights

    # Prevent the car from stalling
    if np.all(pre_action == [0, 0, 1]) and car_speed < 0.5:
        action[1] = max(action[1], 0.5)  # Ensure some throttle to avoid stalling
    return action
