#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cvc/raster.hpp"

namespace cvc {

// Binary PGM (P5). Images are quantized to maxval 255; masks use 0/255.
void write_pgm(const std::filesystem::path& path, const GrayImage& img);
void write_pgm(const std::filesystem::path& path, const BinaryMask& mask);
/// Accepts maxval 1..65535 (16-bit samples big-endian).
GrayImage read_pgm(const std::filesystem::path& path);
/// Pixels above half of maxval are set.
BinaryMask read_pgm_mask(const std::filesystem::path& path);

// Grayscale PFM ("Pf"), scale -1.0 (little-endian float32), rows stored
// bottom to top. Reading also accepts big-endian (positive scale).
void write_pfm(const std::filesystem::path& path, const ProbMap& map);
ProbMap read_pfm(const std::filesystem::path& path);

// Annotation lines: {"image_id":str,"class":str,"points":[[x,y],...]}
std::string annotation_to_json_line(const PolylineAnnotation& ann);
PolylineAnnotation annotation_from_json_line(const std::string& line);
void write_annotations(const std::filesystem::path& path,
                       const std::vector<PolylineAnnotation>& anns);
std::vector<PolylineAnnotation> read_annotations(const std::filesystem::path& path);

/// Writes bytes atomically enough for our purposes (temp file + rename).
void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace cvc
