#pragma once

namespace absorber {

// Entry point behind the absorber binary. Exit codes: 0 success, 1 failure
// (single-line diagnostic on stderr), 2 usage errors.
int cli_dispatch(int argc, const char* const* argv);

} // namespace absorber
