#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace handssl {

// Minimal tagged binary archive: named strings, u64s, doubles and double
// vectors behind an 8-byte magic + format-version header. Little-endian.
class ArchiveWriter {
 public:
  explicit ArchiveWriter(const std::filesystem::path& path, uint32_t version = 1)
      : os_(path, std::ios::binary), path_(path.string()) {
    if (!os_) throw std::runtime_error("cannot open checkpoint for writing: " + path_);
    os_.write("HSSLCKPT", 8);
    put_raw_u64(version);
  }

  void put_string(const std::string& key, const std::string& v) {
    put_tag('S', key);
    put_raw_u64(v.size());
    os_.write(v.data(), std::streamsize(v.size()));
  }

  void put_u64(const std::string& key, uint64_t v) {
    put_tag('U', key);
    put_raw_u64(v);
  }

  void put_double(const std::string& key, double v) {
    put_tag('D', key);
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }

  void put_vec(const std::string& key, const std::vector<double>& v) {
    put_tag('V', key);
    put_raw_u64(v.size());
    os_.write(reinterpret_cast<const char*>(v.data()), std::streamsize(v.size() * sizeof(double)));
  }

  void finish() {
    os_.put('E');
    os_.flush();
    if (!os_) throw std::runtime_error("failed writing checkpoint: " + path_);
    os_.close();
  }

 private:
  void put_tag(char tag, const std::string& key) {
    os_.put(tag);
    put_raw_u64(key.size());
    os_.write(key.data(), std::streamsize(key.size()));
  }
  void put_raw_u64(uint64_t v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }

  std::ofstream os_;
  std::string path_;
};

class Archive {
 public:
  std::map<std::string, std::string> strings;
  std::map<std::string, uint64_t> u64s;
  std::map<std::string, double> doubles;
  std::map<std::string, std::vector<double>> vecs;
  uint32_t version = 0;

  static Archive read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, "HSSLCKPT", 8) != 0)
      throw std::runtime_error("not a handssl checkpoint: " + path.string());
    Archive a;
    uint64_t ver = 0;
    read_u64(is, ver, path);
    a.version = uint32_t(ver);
    for (;;) {
      const int tag = is.get();
      if (tag == 'E') break;
      if (tag == EOF) throw std::runtime_error("truncated checkpoint: " + path.string());
      const std::string key = read_string(is, path);
      switch (tag) {
        case 'S':
          a.strings[key] = read_string(is, path);
          break;
        case 'U': {
          uint64_t v;
          read_u64(is, v, path);
          a.u64s[key] = v;
          break;
        }
        case 'D': {
          double v;
          if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
            throw std::runtime_error("truncated checkpoint: " + path.string());
          a.doubles[key] = v;
          break;
        }
        case 'V': {
          uint64_t n;
          read_u64(is, n, path);
          std::vector<double> v(n);
          if (!is.read(reinterpret_cast<char*>(v.data()), std::streamsize(n * sizeof(double))))
            throw std::runtime_error("truncated checkpoint: " + path.string());
          a.vecs[key] = std::move(v);
          break;
        }
        default:
          throw std::runtime_error("corrupt checkpoint entry in " + path.string());
      }
    }
    return a;
  }

  const std::vector<double>& vec(const std::string& key) const {
    auto it = vecs.find(key);
    if (it == vecs.end()) throw std::runtime_error("checkpoint missing array: " + key);
    return it->second;
  }

  const std::string& str(const std::string& key) const {
    auto it = strings.find(key);
    if (it == strings.end()) throw std::runtime_error("checkpoint missing field: " + key);
    return it->second;
  }

  uint64_t u64(const std::string& key) const {
    auto it = u64s.find(key);
    if (it == u64s.end()) throw std::runtime_error("checkpoint missing field: " + key);
    return it->second;
  }

 private:
  static void read_u64(std::istream& is, uint64_t& v, const std::filesystem::path& path) {
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
      throw std::runtime_error("truncated checkpoint: " + path.string());
  }
  static std::string read_string(std::istream& is, const std::filesystem::path& path) {
    uint64_t n;
    read_u64(is, n, path);
    std::string s(n, '\0');
    if (!is.read(s.data(), std::streamsize(n)))
      throw std::runtime_error("truncated checkpoint: " + path.string());
    return s;
  }
};

}  // namespace handssl
