#include "scvlm/frame_io.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "scvlm/errors.hpp"

namespace scvlm {

namespace fs = std::filesystem;

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::istream& in) {
  std::string tok;
  while (in) {
    const int c = in.peek();
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

}  // namespace

std::string frame_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05d.ppm", index);
  return buf;
}

void write_ppm(const fs::path& path, const FrameSequence& seq, int frame) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << seq.width() << ' ' << seq.height() << "\n255\n";
  const auto px = seq.frame(frame);
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void save_frames(const FrameSequence& seq, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  for (int t = 0; t < seq.frames(); ++t) write_ppm(dir / frame_file_name(t), seq, t);
}

FrameSequence load_frames(const fs::path& dir, double fps) {
  if (!fs::is_directory(dir)) throw IoError("frame directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no frames in " + dir.string());

  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;
  for (const auto& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open " + file.string());
    const std::string magic = header_token(in);
    const std::string w = header_token(in);
    const std::string h = header_token(in);
    const std::string maxval = header_token(in);
    if (magic != "P6" || maxval != "255") throw IoError(file.string() + ": not an 8-bit P6 image");
    in.get();  // single whitespace byte before the raster
    int fw = 0;
    int fh = 0;
    try {
      fw = std::stoi(w);
      fh = std::stoi(h);
    } catch (const std::exception&) {
      throw IoError(file.string() + ": bad image header");
    }
    if (fw < 1 || fh < 1) throw IoError(file.string() + ": bad image size");
    if (height == 0) {
      height = fh;
      width = fw;
    } else if (fh != height || fw != width) {
      throw IoError(file.string() + ": frame size differs from the first frame");
    }
    const std::size_t n = static_cast<std::size_t>(fw) * fh * 3;
    const std::size_t old = data.size();
    data.resize(old + n);
    in.read(reinterpret_cast<char*>(data.data() + old), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) throw IoError(file.string() + ": truncated");
  }
  return FrameSequence(static_cast<int>(files.size()), height, width, fps, std::move(data));
}

}  // namespace scvlm
