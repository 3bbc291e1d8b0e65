// Acceptance criteria suite; populated as modules land.
