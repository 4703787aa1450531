// acceptance checks are added alongside the physics modules
