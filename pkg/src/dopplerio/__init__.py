"""IMU-centric odometry and SLAM with Doppler-measuring range sensors."""

__version__ = "0.1.0"
