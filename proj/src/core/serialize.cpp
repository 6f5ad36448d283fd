// SPDX-License-Identifier: Apache-2.0
#include "occflow/core/serialize.h"

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>

namespace occflow::ser {

namespace {

constexpr char kMagic[4] = {'O', 'F', 'L', 'W'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& buf, const void* p, size_t n) {
  buf.append(static_cast<const char*>(p), n);
}

template <class T>
void put_pod(std::string& buf, T v) {
  put_bytes(buf, &v, sizeof(T));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void take(void* p, size_t n) {
    OCCFLOW_CHECK(pos + n <= buf.size(), DataError, "archive truncated");
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <class T>
  T pod() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  std::string str(size_t n) {
    OCCFLOW_CHECK(pos + n <= buf.size(), DataError, "archive truncated");
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void Archive::save(const std::string& path, bool compress) const {
  std::string buf;
  put_bytes(buf, kMagic, 4);
  put_pod<uint32_t>(buf, kVersion);
  const std::string meta_s = meta.dump();
  put_pod<uint64_t>(buf, meta_s.size());
  buf += meta_s;
  put_pod<uint32_t>(buf, static_cast<uint32_t>(arrays.size()));
  for (const auto& [name, t] : arrays) {
    put_pod<uint32_t>(buf, static_cast<uint32_t>(name.size()));
    buf += name;
    const uint64_t raw_len = static_cast<uint64_t>(t.numel()) * sizeof(real);
    uint8_t codec = 0;
    std::string payload;
    if (compress && raw_len >= 256) {
      uLongf bound = compressBound(static_cast<uLong>(raw_len));
      payload.resize(bound);
      const int rc = compress2(reinterpret_cast<Bytef*>(payload.data()), &bound,
                               reinterpret_cast<const Bytef*>(t.data()),
                               static_cast<uLong>(raw_len), 6);
      OCCFLOW_CHECK(rc == Z_OK, DataError, "zlib compress failed rc=" << rc);
      if (bound < raw_len) {
        payload.resize(bound);
        codec = 1;
      }
    }
    if (codec == 0) {
      payload.assign(reinterpret_cast<const char*>(t.data()), raw_len);
    }
    put_pod<uint8_t>(buf, codec);
    put_pod<uint32_t>(buf, static_cast<uint32_t>(t.ndim()));
    for (int d = 0; d < t.ndim(); ++d) put_pod<int32_t>(buf, t.dim(d));
    put_pod<uint64_t>(buf, raw_len);
    put_pod<uint64_t>(buf, payload.size());
    buf += payload;
  }
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()), static_cast<uInt>(buf.size())));
  put_pod<uint32_t>(buf, crc);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  OCCFLOW_CHECK(f.good(), DataError, "cannot open " << path << " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  OCCFLOW_CHECK(f.good(), DataError, "short write to " << path);
}

Archive Archive::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  OCCFLOW_CHECK(f.good(), DataError, "cannot open " << path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  OCCFLOW_CHECK(buf.size() >= 16, DataError, "archive too small: " << path);

  const uint32_t stored_crc =
      *reinterpret_cast<const uint32_t*>(buf.data() + buf.size() - sizeof(uint32_t));
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(buf.data()),
            static_cast<uInt>(buf.size() - sizeof(uint32_t))));
  OCCFLOW_CHECK(crc == stored_crc, DataError, "archive checksum mismatch: " << path);

  Reader r{buf};
  char magic[4];
  r.take(magic, 4);
  OCCFLOW_CHECK(std::memcmp(magic, kMagic, 4) == 0, DataError, "bad archive magic: " << path);
  const uint32_t version = r.pod<uint32_t>();
  OCCFLOW_CHECK(version == kVersion, DataError, "unsupported archive version " << version);

  Archive a;
  const uint64_t meta_len = r.pod<uint64_t>();
  a.meta = nlohmann::json::parse(r.str(meta_len));
  const uint32_t n_arrays = r.pod<uint32_t>();
  for (uint32_t i = 0; i < n_arrays; ++i) {
    const uint32_t name_len = r.pod<uint32_t>();
    std::string name = r.str(name_len);
    const uint8_t codec = r.pod<uint8_t>();
    const uint32_t ndim = r.pod<uint32_t>();
    std::vector<int> shape(ndim);
    for (uint32_t d = 0; d < ndim; ++d) shape[d] = r.pod<int32_t>();
    const uint64_t raw_len = r.pod<uint64_t>();
    const uint64_t stored_len = r.pod<uint64_t>();
    std::string payload = r.str(stored_len);
    Tensor t(shape);
    OCCFLOW_CHECK(raw_len == static_cast<uint64_t>(t.numel()) * sizeof(real), DataError,
                  "array " << name << " size mismatch");
    if (codec == 0) {
      OCCFLOW_CHECK(stored_len == raw_len, DataError, "raw array length mismatch");
      std::memcpy(t.data(), payload.data(), raw_len);
    } else if (codec == 1) {
      uLongf out_len = static_cast<uLongf>(raw_len);
      const int rc = uncompress(reinterpret_cast<Bytef*>(t.data()), &out_len,
                                reinterpret_cast<const Bytef*>(payload.data()),
                                static_cast<uLong>(payload.size()));
      OCCFLOW_CHECK(rc == Z_OK && out_len == raw_len, DataError,
                    "zlib inflate failed for array " << name);
    } else {
      OCCFLOW_CHECK(false, DataError, "unknown codec " << int(codec));
    }
    a.arrays.emplace_back(std::move(name), std::move(t));
  }
  return a;
}

}  // namespace occflow::ser
