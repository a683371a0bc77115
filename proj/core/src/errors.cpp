#include "gibbscs/errors.hpp"

#include <filesystem>

namespace gibbscs {

ExitCode exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const InvalidInput*>(&e)) return ExitCode::kArgument;
  if (dynamic_cast<const IoError*>(&e)) return ExitCode::kIo;
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return ExitCode::kIo;
  if (dynamic_cast<const NumericalError*>(&e)) return ExitCode::kNumerical;
  return ExitCode::kNumerical;
}

}  // namespace gibbscs
