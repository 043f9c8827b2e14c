#include "safe/io/exchange.hpp"

#include <unistd.h>

#include <atomic>
#include <cstdlib>

#include "safe/error.hpp"

namespace safe::io {
namespace {

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size()))
    s.replace(pos, from.size(), to);
  return s;
}

}  // namespace

std::filesystem::path make_temp_dir(const std::string& prefix) {
  static std::atomic<unsigned> counter{0};
  const auto base = std::filesystem::temp_directory_path();
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto p = base / (prefix + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    if (std::filesystem::create_directory(p)) return p;
  }
  fail(ErrorKind::Io, "cannot create temp directory");
}

void replace_directory(const std::filesystem::path& target,
                       const std::function<void(const std::filesystem::path&)>& fill) {
  namespace fs = std::filesystem;
  const fs::path parent = target.parent_path().empty() ? fs::path(".") : target.parent_path();
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + parent.string() + ": " + ec.message());
  const std::string tag = "." + target.filename().string() + "." + std::to_string(::getpid());
  const fs::path staging = parent / (tag + ".tmp");
  const fs::path retired = parent / (tag + ".old");
  fs::remove_all(staging);
  fs::remove_all(retired);
  fs::create_directory(staging, ec);
  if (ec) fail(ErrorKind::Io, "cannot write into " + parent.string() + ": " + ec.message());
  try {
    fill(staging);
  } catch (...) {
    fs::remove_all(staging);
    throw;
  }
  if (fs::exists(target)) fs::rename(target, retired);
  fs::rename(staging, target);
  fs::remove_all(retired);
}

RawTensor run_exchange(const std::string& command_template, const RawTensor& input) {
  require(!command_template.empty(), "external command is empty", ErrorKind::External);
  const auto dir = make_temp_dir("safe-exchange");
  const auto in = dir / "in.saft";
  const auto out = dir / "out.saft";
  write_tensor(in, input);
  std::string cmd = replace_all(command_template, "{in}", "'" + in.string() + "'");
  cmd = replace_all(cmd, "{out}", "'" + out.string() + "'");
  const int status = std::system(cmd.c_str());
  if (status != 0) {
    std::filesystem::remove_all(dir);
    fail(ErrorKind::External, "external command failed (status " + std::to_string(status) + "): " + cmd);
  }
  if (!std::filesystem::exists(out)) {
    std::filesystem::remove_all(dir);
    fail(ErrorKind::External, "external command produced no output: " + cmd);
  }
  RawTensor result = read_tensor(out);
  std::filesystem::remove_all(dir);
  return result;
}

}  // namespace safe::io
