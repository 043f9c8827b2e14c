#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include "safe/io/tensor_file.hpp"

namespace safe::io {

/// Runs an external tool through files: writes `input` to a temp container,
/// runs `command_template` with {in} and {out} replaced by the paths, and
/// returns the container the tool wrote. Throws ErrorKind::External on a
/// nonzero exit status or a missing output.
RawTensor run_exchange(const std::string& command_template, const RawTensor& input);

/// Fresh private temp directory under the system temp path.
std::filesystem::path make_temp_dir(const std::string& prefix);

/// Fills a sibling staging directory with `fill`, then swaps it into place
/// at `target` by rename. Readers never see a half-written `target`.
void replace_directory(const std::filesystem::path& target,
                       const std::function<void(const std::filesystem::path&)>& fill);

}  // namespace safe::io
