#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crania/layers.hpp"
#include "crania/optim.hpp"

namespace crania {

// ---------------------------------------------------------------------------
// Checkpoint format: a text index followed by a raw little-endian float32
// payload. Offsets are in floats from the start of the payload.
//
//   CKPT1
//   global_step <G>
//   records <K>
//   param <name> <step_count> <rank> <dims...> <offset>   (values, m, v)
//   buffer <name> <rank> <dims...> <offset>               (values)
//   DATA
//   <payload bytes>
//
// A param record stores three consecutive blocks of numel floats each: the
// values, then the first and second Adam moment estimates. Tensors are
// matched by name on load, so layout changes in the index are harmless as
// long as names and shapes agree.
// ---------------------------------------------------------------------------

namespace detail_ckpt {

inline void append_f32le(std::vector<unsigned char>& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  out.push_back(static_cast<unsigned char>(u & 0xff));
  out.push_back(static_cast<unsigned char>((u >> 8) & 0xff));
  out.push_back(static_cast<unsigned char>((u >> 16) & 0xff));
  out.push_back(static_cast<unsigned char>((u >> 24) & 0xff));
}

inline float read_f32le(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) |
                          (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) |
                          (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

struct Record {
  bool is_param = false;
  std::int64_t step_count = 0;
  std::vector<std::int64_t> shape;
  std::int64_t offset = 0;  // in floats
  std::int64_t numel = 0;
};

}  // namespace detail_ckpt

/// Serializes parameters (with their optimizer state), named buffers, and the
/// global step counter. The payload is always 32-bit, so training at higher
/// precision resumes with values rounded to float.
template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     std::int64_t global_step,
                     const std::vector<Parameter<T>*>& params,
                     const std::vector<NamedBuffer<T>>& buffers) {
  std::ostringstream index;
  std::vector<unsigned char> payload;
  std::int64_t offset = 0;

  index << "CKPT1\n";
  index << "global_step " << global_step << '\n';
  index << "records " << params.size() + buffers.size() << '\n';
  for (const Parameter<T>* p : params) {
    const auto& shape = p->value.shape();
    index << "param " << p->name << ' ' << p->step_count << ' ' << shape.size();
    for (std::int64_t d : shape) index << ' ' << d;
    index << ' ' << offset << '\n';
    const auto& vals = p->value.values();
    for (T v : vals) detail_ckpt::append_f32le(payload, static_cast<float>(v));
    for (T v : p->adam_m) detail_ckpt::append_f32le(payload, static_cast<float>(v));
    for (T v : p->adam_v) detail_ckpt::append_f32le(payload, static_cast<float>(v));
    offset += 3 * static_cast<std::int64_t>(vals.size());
  }
  for (const auto& [name, tensor] : buffers) {
    const auto& shape = tensor.shape();
    index << "buffer " << name << ' ' << shape.size();
    for (std::int64_t d : shape) index << ' ' << d;
    index << ' ' << offset << '\n';
    for (T v : tensor.values())
      detail_ckpt::append_f32le(payload, static_cast<float>(v));
    offset += static_cast<std::int64_t>(tensor.values().size());
  }
  index << "DATA\n";

  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw io_error("save_checkpoint: cannot open '" + path.string() + "'");
  const std::string head = index.str();
  out.write(head.data(), static_cast<std::streamsize>(head.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
  if (!out)
    throw io_error("save_checkpoint: write failed for '" + path.string() + "'");
}

/// Restores parameters, optimizer state, and buffers by name; returns the
/// stored global step. Every name must match in both directions and shapes
/// must agree exactly.
template <typename T>
std::int64_t load_checkpoint(const std::filesystem::path& path,
                             const std::vector<Parameter<T>*>& params,
                             const std::vector<NamedBuffer<T>>& buffers) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw io_error("load_checkpoint: cannot open '" + path.string() + "'");
  auto fail = [&](const std::string& why) -> io_error {
    return io_error("load_checkpoint: " + why + " in '" + path.string() + "'");
  };

  std::string line;
  if (!std::getline(in, line) || line != "CKPT1") throw fail("bad magic");
  std::int64_t global_step = 0, record_count = 0;
  {
    std::string key;
    if (!std::getline(in, line)) throw fail("truncated header");
    std::istringstream ls(line);
    if (!(ls >> key >> global_step) || key != "global_step")
      throw fail("missing global_step");
    if (!std::getline(in, line)) throw fail("truncated header");
    std::istringstream rs(line);
    if (!(rs >> key >> record_count) || key != "records")
      throw fail("missing record count");
  }

  std::map<std::string, detail_ckpt::Record> records;
  std::int64_t payload_floats = 0;
  for (std::int64_t i = 0; i < record_count; ++i) {
    if (!std::getline(in, line)) throw fail("truncated index");
    std::istringstream ls(line);
    std::string kind, name;
    detail_ckpt::Record rec;
    if (!(ls >> kind >> name)) throw fail("malformed record");
    rec.is_param = (kind == "param");
    if (!rec.is_param && kind != "buffer")
      throw fail("unknown record kind '" + kind + "'");
    if (rec.is_param && !(ls >> rec.step_count))
      throw fail("malformed record");
    std::int64_t rank = 0;
    if (!(ls >> rank) || rank < 0) throw fail("malformed record");
    rec.numel = 1;
    for (std::int64_t r = 0; r < rank; ++r) {
      std::int64_t d = 0;
      if (!(ls >> d) || d <= 0) throw fail("malformed record");
      rec.shape.push_back(d);
      rec.numel *= d;
    }
    if (!(ls >> rec.offset)) throw fail("malformed record");
    if (!records.emplace(name, rec).second)
      throw fail("duplicate record '" + name + "'");
    payload_floats += rec.is_param ? 3 * rec.numel : rec.numel;
  }
  if (!std::getline(in, line) || line != "DATA") throw fail("missing payload");

  std::vector<unsigned char> payload(
      static_cast<std::size_t>(payload_floats) * 4);
  in.read(reinterpret_cast<char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (static_cast<std::size_t>(in.gcount()) != payload.size())
    throw fail("payload shorter than index");

  auto read_block = [&](std::int64_t offset, std::int64_t numel,
                        std::vector<T>& dst) {
    if (offset < 0 || offset + numel > payload_floats)
      throw fail("record offset out of range");
    dst.resize(static_cast<std::size_t>(numel));
    const unsigned char* base =
        payload.data() + static_cast<std::size_t>(offset) * 4;
    for (std::int64_t i = 0; i < numel; ++i)
      dst[static_cast<std::size_t>(i)] =
          static_cast<T>(detail_ckpt::read_f32le(base + i * 4));
  };

  std::size_t matched = 0;
  for (Parameter<T>* p : params) {
    auto it = records.find(p->name);
    if (it == records.end()) throw fail("missing parameter '" + p->name + "'");
    const auto& rec = it->second;
    if (!rec.is_param)
      throw fail("record '" + p->name + "' is not a parameter");
    if (rec.shape != p->value.shape())
      throw fail("shape mismatch for '" + p->name + "'");
    read_block(rec.offset, rec.numel, p->value.values());
    std::vector<T> tmp;
    read_block(rec.offset + rec.numel, rec.numel, tmp);
    p->adam_m = tmp;
    read_block(rec.offset + 2 * rec.numel, rec.numel, tmp);
    p->adam_v = tmp;
    p->step_count = rec.step_count;
    ++matched;
  }
  for (const auto& [name, tensor] : buffers) {
    auto it = records.find(name);
    if (it == records.end()) throw fail("missing buffer '" + name + "'");
    const auto& rec = it->second;
    if (rec.is_param) throw fail("record '" + name + "' is not a buffer");
    if (rec.shape != tensor.shape())
      throw fail("shape mismatch for '" + name + "'");
    // The pair holds a shared handle; a copy writes through to the live
    // tensor.
    Tensor<T> handle = tensor;
    read_block(rec.offset, rec.numel, handle.values());
    ++matched;
  }
  if (matched != records.size())
    throw fail("checkpoint holds records the model does not expect");
  return global_step;
}

}  // namespace crania
